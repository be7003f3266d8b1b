"""Training loop, plateau scheduling, early stopping, and finite-difference
gradient checking.

The scheduler and stopper are deliberately hand-rolled: both count epochs
without improvement (improvement means dropping below the best by more than
``MIN_DELTA``), the scheduler halves the learning rate the moment its patience
is spent, and the stopper ends the run the moment its own is. A metric held
constant for ``patience + 1`` epochs therefore triggers exactly one reduction.

All shuffling comes from a numpy generator seeded by the config, so a fit is
reproducible bit for bit given the same model seed and config.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .core import ConfigError, DatasetError, EmptyMaskError, NumericFault, Sample, parse_kv_lines
from .data import Dataset, pad_batch
from .evaluate import per_sample_mpjpe
from .model import KeypointLifter, backward
from .procrustes import GRAD_MODES, align

LOSS_SPACES = ("aligned", "canonical_no_onp")

LR_FLOOR = 1e-6
MIN_DELTA = 1e-8


@dataclass
class TrainConfig:
    lr0: float = 0.001
    plateau_patience: int = 20
    plateau_factor: float = 0.5
    early_stop_patience: int = 30
    max_epochs: int = 200
    batch_size: int = 32
    seed: int = 0
    loss_space: str = "aligned"
    procrustes_grad: str = "stop"

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        if self.plateau_patience < 1:
            raise ConfigError(f"plateau_patience must be >= 1, got {self.plateau_patience}")
        if not 0.0 < self.plateau_factor < 1.0:
            raise ConfigError(f"plateau_factor must be in (0, 1), got {self.plateau_factor}")
        if self.early_stop_patience < 1:
            raise ConfigError(
                f"early_stop_patience must be >= 1, got {self.early_stop_patience}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.loss_space not in LOSS_SPACES:
            raise ConfigError(f"loss_space must be one of {LOSS_SPACES}, got {self.loss_space!r}")
        if self.procrustes_grad not in GRAD_MODES:
            raise ConfigError(
                f"procrustes_grad must be one of {GRAD_MODES}, got {self.procrustes_grad!r}")


def mse_loss(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean over samples of (squared error summed over visible joints / visible
    count). Masked joints contribute nothing; an all-masked sample is an error."""
    n_vis = mask.sum(dim=-1)
    if not bool((n_vis > 0).all()):
        raise EmptyMaskError("a sample with no visible joints has no loss")
    err = ((pred - target).square() * mask.unsqueeze(-1)).sum(dim=(-1, -2))
    return (err / n_vis).mean()


def make_optimizer(model: torch.nn.Module, lr: float) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=lr, betas=(0.9, 0.999), eps=1e-8)


class PlateauScheduler:
    """Halve the lr after ``patience`` consecutive non-improving epochs."""

    def __init__(self, optimizer: torch.optim.Optimizer, patience: int = 20,
                 factor: float = 0.5, floor: float = LR_FLOOR, min_delta: float = MIN_DELTA):
        self.optimizer = optimizer
        self.patience = patience
        self.factor = factor
        self.floor = floor
        self.min_delta = min_delta
        self.best = math.inf
        self.bad_epochs = 0

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]

    def step(self, metric: float) -> bool:
        """Record one epoch's metric; return True if the lr was reduced."""
        if metric < self.best - self.min_delta:
            self.best = metric
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs < self.patience:
            return False
        self.bad_epochs = 0
        for group in self.optimizer.param_groups:
            group["lr"] = max(group["lr"] * self.factor, self.floor)
        return True


class EarlyStopper:
    """Signal a stop after ``patience`` consecutive non-improving epochs."""

    def __init__(self, patience: int = 30, min_delta: float = MIN_DELTA):
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, metric: float) -> bool:
        if metric < self.best - self.min_delta:
            self.best = metric
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience


@dataclass
class TrainHistory:
    epochs: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_mpjpe: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stop_reason: str = ""

    def append(self, epoch: int, train_loss: float, val_mpjpe: float, lr: float) -> None:
        self.epochs.append(epoch)
        self.train_loss.append(train_loss)
        self.val_mpjpe.append(val_mpjpe)
        self.lr.append(lr)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_mpjpe", "lr"])
            for row in zip(self.epochs, self.train_loss, self.val_mpjpe, self.lr):
                writer.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3])])

    @staticmethod
    def read_csv(path) -> "TrainHistory":
        history = TrainHistory()
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["epoch", "train_loss", "val_mpjpe", "lr"]:
                raise DatasetError(f"unexpected history header {header!r}", line=1)
            for ln, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != 4:
                    raise DatasetError(f"expected 4 columns, got {len(row)}", line=ln)
                try:
                    history.append(int(row[0]), float(row[1]), float(row[2]), float(row[3]))
                except ValueError as exc:
                    raise DatasetError(f"bad history row: {exc}", line=ln) from exc
        return history


def _require_ground_truth(dataset: Dataset, role: str) -> None:
    if not dataset.samples:
        raise DatasetError(f"{role} dataset is empty")
    for s in dataset.samples:
        if s.s3d is None:
            raise DatasetError(f"{role} dataset contains samples without ground truth")


def _ensure_finite_prediction(pred: torch.Tensor) -> None:
    # must run before the alignment solve: an SVD fed non-finite values dies
    # with an opaque backend error instead of this package's fault type
    if not bool(torch.isfinite(pred).all()):
        raise NumericFault("non-finite model prediction", tensor_name="prediction")


def _batch_loss(model: KeypointLifter, batch: list[Sample], config: TrainConfig):
    w2d, mask, adj, s3d = pad_batch(batch)
    pred = model(w2d, mask, adj)
    _ensure_finite_prediction(pred)
    mask = mask.to(pred.dtype)
    s3d = s3d.to(pred.dtype)
    if config.loss_space == "aligned":
        result = align(pred, s3d, mask, grad_mode=config.procrustes_grad)
        return mse_loss(result.aligned, s3d, mask)
    return mse_loss(pred, s3d, mask)


def _validation_metric(model: KeypointLifter, dataset: Dataset, config: TrainConfig) -> float:
    """Mean per-sample MPJPE on the validation set, in the training loss space."""
    total = 0.0
    with torch.no_grad():
        for start in range(0, len(dataset.samples), config.batch_size):
            batch = dataset.samples[start:start + config.batch_size]
            w2d, mask, adj, s3d = pad_batch(batch)
            pred = model(w2d, mask, adj)
            _ensure_finite_prediction(pred)
            mask = mask.to(pred.dtype)
            s3d = s3d.to(pred.dtype)
            if config.loss_space == "aligned":
                pred = align(pred, s3d, mask, grad_mode="stop").aligned
            total += float(per_sample_mpjpe(pred, s3d, mask).sum().item())
    return total / len(dataset.samples)


def fit(model: KeypointLifter, train_set: Dataset, val_set: Dataset,
        config: TrainConfig) -> TrainHistory:
    """Train until early stop or the epoch budget; leave the model holding the
    weights of its best validation epoch.

    The recorded lr of an epoch is the rate its updates actually used; a
    plateau reduction takes effect the following epoch. On a non-finite loss
    or gradient a :class:`NumericFault` is raised with the partial history
    attached as ``exc.history``.
    """
    _require_ground_truth(train_set, "training")
    _require_ground_truth(val_set, "validation")
    rng = np.random.default_rng(config.seed)
    optimizer = make_optimizer(model, config.lr0)
    scheduler = PlateauScheduler(optimizer, patience=config.plateau_patience,
                                 factor=config.plateau_factor)
    stopper = EarlyStopper(patience=config.early_stop_patience)
    history = TrainHistory()
    best_metric = math.inf
    best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    history.best_epoch = 0
    stop_reason = "max_epochs"

    def numeric_fault(message: str, tensor_name: str = "") -> NumericFault:
        exc = NumericFault(message, tensor_name=tensor_name)
        exc.history = history
        return exc

    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(train_set.samples))
        epoch_loss = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = [train_set.samples[i] for i in order[start:start + config.batch_size]]
            try:
                loss = _batch_loss(model, batch, config)
            except NumericFault as exc:
                exc.history = history
                raise
            if not math.isfinite(loss.item()):
                raise numeric_fault(f"non-finite training loss at epoch {epoch}", "loss")
            optimizer.zero_grad()
            loss.backward()
            for name, param in model.named_parameters():
                if param.grad is not None and not bool(torch.isfinite(param.grad).all()):
                    raise numeric_fault(
                        f"non-finite gradient in {name} at epoch {epoch}", name)
            optimizer.step()
            epoch_loss += loss.item() * len(batch)
        train_loss = epoch_loss / len(train_set.samples)
        try:
            val_metric = _validation_metric(model, val_set, config)
        except NumericFault as exc:
            exc.history = history
            raise
        history.append(epoch, train_loss, val_metric, scheduler.lr)
        if val_metric < best_metric:
            best_metric = val_metric
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            history.best_epoch = epoch
        scheduler.step(val_metric)
        if stopper.step(val_metric):
            stop_reason = "early_stop"
            break
    model.load_state_dict(best_state)
    history.stop_reason = stop_reason
    return history


@dataclass
class GradCheckReport:
    eps: float
    threshold: float
    atol: float
    checked: int
    max_rel_err: float
    worst_param: str
    per_param: dict[str, float]

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.threshold


def gradient_check(model: KeypointLifter, sample: Sample, eps: float = 1e-3,
                   threshold: float = 1e-4, max_coords: int = 100,
                   seed: int = 0, atol: float = 1e-7) -> GradCheckReport:
    """Compare analytic parameter gradients against central finite differences.

    Small tensors are checked exhaustively; larger ones on a seeded subsample
    of ``max_coords`` coordinates. Relative error uses the symmetric
    denominator ``max(1e-12, |analytic| + |numeric|)``; a coordinate whose two
    estimates agree within ``atol`` counts as exact. The default is the
    measurement floor of a central difference at the default step: roundoff
    plus truncation come to about 1e-7, and several parameters (the key
    biases, the source half of a graph attention vector on a single-slope
    softmax row) have structurally zero gradients where the difference reads
    only that noise.
    """
    if eps <= 0:
        raise ConfigError(f"eps must be positive, got {eps}")
    if atol < 0:
        raise ConfigError(f"atol must be >= 0, got {atol}")
    if max_coords < 1:
        raise ConfigError(f"max_coords must be >= 1, got {max_coords}")
    rng = np.random.default_rng(seed)
    w2d = sample.w2d.to(model.dtype)
    mask = sample.mask.to(model.dtype)
    adj = sample.adjacency.to(model.dtype)
    upstream = torch.from_numpy(
        rng.standard_normal((sample.n_joints, 3))).to(model.dtype)
    analytic = backward(model, w2d, mask, adj, upstream)

    def objective() -> float:
        with torch.no_grad():
            return float((model(w2d, mask, adj) * upstream).sum().item())

    max_rel = 0.0
    worst = ""
    checked = 0
    per_param: dict[str, float] = {}
    for name, param in model.named_parameters():
        numel = param.numel()
        if numel <= max_coords:
            coords = np.arange(numel)
        else:
            coords = np.sort(rng.choice(numel, size=max_coords, replace=False))
        snapshot = param.detach().clone()
        flat = param.data.view(-1)
        grad_flat = analytic[name].reshape(-1)
        tensor_max = 0.0
        for idx in coords:
            idx = int(idx)
            origin = snapshot.view(-1)[idx].item()
            flat[idx] = origin + eps
            f_plus = objective()
            flat[idx] = origin - eps
            f_minus = objective()
            flat[idx] = origin
            numeric = (f_plus - f_minus) / (2.0 * eps)
            exact = float(grad_flat[idx].item())
            if abs(exact - numeric) <= atol:
                rel = 0.0
            else:
                rel = abs(exact - numeric) / max(1e-12, abs(exact) + abs(numeric))
            checked += 1
            if rel > tensor_max:
                tensor_max = rel
            if rel > max_rel:
                max_rel = rel
                worst = name
        with torch.no_grad():
            param.copy_(snapshot)
        per_param[name] = tensor_max
    return GradCheckReport(eps=eps, threshold=threshold, atol=atol, checked=checked,
                           max_rel_err=max_rel, worst_param=worst, per_param=per_param)


_TRAIN_FIELDS = {
    "lr0": float,
    "plateau_patience": int,
    "plateau_factor": float,
    "early_stop_patience": int,
    "max_epochs": int,
    "batch_size": int,
    "seed": int,
    "loss_space": str,
    "procrustes_grad": str,
}


def load_train_config(path) -> TrainConfig:
    """Flat ``key = value`` file; every field optional, unknown keys rejected."""
    pairs = parse_kv_lines(Path(path).read_text())
    kwargs = {}
    for key, value in pairs.items():
        if key not in _TRAIN_FIELDS:
            raise ConfigError(f"unknown training option {key!r}")
        try:
            kwargs[key] = _TRAIN_FIELDS[key](value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {value!r}") from exc
    return TrainConfig(**kwargs)
