"""Training engine: loss arithmetic, the first optimizer step in closed form,
counter simulations for the scheduler and stopper, and a real overfit run.

The optimizer oracle is the adaptive-moment update written out by hand for a
single scalar step; the scheduler/stopper oracles are counted epoch by epoch
on paper. The overfit recipe (32 samples, dim 32, lr 5e-3) was tuned once and
found to drop the loss more than 1000-fold; the assertion keeps the margin at
the documented 100x.
"""

import math

import numpy as np
import pytest
import torch
from torch import nn

from lift3d import (
    ConfigError,
    DatasetError,
    DatasetSpec,
    EmptyMaskError,
    EarlyStopper,
    GradCheckReport,
    KeypointLifter,
    ModelConfig,
    NumericFault,
    PlateauScheduler,
    Sample,
    TrainConfig,
    TrainHistory,
    edges_to_adjacency,
    fit,
    gradient_check,
    load_train_config,
    make_dataset,
    mse_loss,
    make_optimizer,
)
from lift3d.data import Dataset
from lift3d.train import _validation_metric


def t(x):
    return torch.as_tensor(x, dtype=torch.float64)


def overfit_sets():
    spec = DatasetSpec(categories=[("chain6", 32)], noise_std=0.0,
                       occlusion_rate=0.0, seed=11)
    return make_dataset(spec)


class TestTrainConfig:
    def test_defaults_match_documented_values(self):
        cfg = TrainConfig()
        assert cfg.lr0 == 0.001
        assert cfg.plateau_patience == 20
        assert cfg.plateau_factor == 0.5
        assert cfg.early_stop_patience == 30
        assert cfg.loss_space == "aligned"

    @pytest.mark.parametrize("kwargs", [
        dict(lr0=0.0),
        dict(plateau_patience=0),
        dict(plateau_factor=1.0),
        dict(early_stop_patience=0),
        dict(max_epochs=0),
        dict(batch_size=0),
        dict(loss_space="raw"),
        dict(procrustes_grad="half"),
    ])
    def test_rejects(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)


class TestMseLoss:
    def test_identical_is_zero(self):
        x = t(np.random.default_rng(0).standard_normal((2, 4, 3)))
        m = torch.ones(2, 4, dtype=torch.float64)
        assert float(mse_loss(x, x, m)) == 0.0

    def test_uniform_unit_offset(self):
        x = t(np.random.default_rng(1).standard_normal((3, 5, 3)))
        y = x + t([1.0, 0.0, 0.0])
        m = torch.ones(3, 5, dtype=torch.float64)
        assert float(mse_loss(x, y, m)) == pytest.approx(1.0, abs=1e-12)

    def test_one_of_two_visible(self):
        # joint 0 exact, joint 1 off by (0,3,4): (0 + 25) / 2 = 12.5
        pred = t([[0.0, 0.0, 0.0], [1.0, 3.0, 4.0]])
        target = t([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        m = torch.ones(2, dtype=torch.float64)
        assert float(mse_loss(pred, target, m)) == pytest.approx(12.5, abs=1e-12)

    def test_masked_joint_excluded(self):
        pred = t([[0.0, 0.0, 0.0], [100.0, 100.0, 100.0], [1.0, 0.0, 0.0]])
        target = torch.zeros(3, 3, dtype=torch.float64)
        m = t([1.0, 0.0, 1.0])
        # visible squared errors 0 and 1 over 2 visible joints
        assert float(mse_loss(pred, target, m)) == pytest.approx(0.5, abs=1e-12)

    def test_empty_mask(self):
        with pytest.raises(EmptyMaskError):
            mse_loss(torch.zeros(1, 3, dtype=torch.float64),
                     torch.zeros(1, 3, dtype=torch.float64),
                     torch.zeros(1, dtype=torch.float64))


class TestOptimizer:
    def test_zero_gradient_leaves_params(self):
        p = nn.Parameter(t([1.5]))
        opt = make_optimizer(nn.ParameterList([p]), lr=0.1)
        p.grad = torch.zeros_like(p)
        opt.step()
        assert float(p.detach()) == 1.5

    def test_first_step_closed_form(self):
        # one scalar step with gradient 1: both moment estimates bias-correct
        # to 1 exactly, so the update is -lr / (1 + eps)
        p = nn.Parameter(t([0.0]))
        opt = make_optimizer(nn.ParameterList([p]), lr=0.1)
        p.grad = torch.ones_like(p)
        opt.step()
        expected = -0.1 / (1.0 + 1e-8)
        assert float(p.detach()) == pytest.approx(expected, abs=1e-15)


class TestPlateauScheduler:
    def _make(self, lr=0.1, patience=3, floor=1e-6):
        p = nn.Parameter(t([0.0]))
        opt = make_optimizer(nn.ParameterList([p]), lr=lr)
        return PlateauScheduler(opt, patience=patience, factor=0.5, floor=floor)

    def test_improving_never_reduces(self):
        sched = self._make()
        for k in range(50):
            assert sched.step(1.0 / (k + 1)) is False
        assert sched.lr == 0.1

    def test_constant_patience_plus_one_reduces_exactly_once(self):
        sched = self._make(patience=4)
        reductions = sum(sched.step(2.0) for _ in range(5))
        assert reductions == 1
        assert sched.lr == pytest.approx(0.05)

    def test_counter_resets_after_reduction(self):
        sched = self._make(patience=2)
        assert [sched.step(1.0) for _ in range(7)] == [
            False, False, True, False, True, False, True]

    def test_improvement_resets_counter(self):
        sched = self._make(patience=3)
        sched.step(1.0)
        sched.step(1.0)
        sched.step(1.0)
        sched.step(0.5)            # improvement wipes the bad streak
        assert sched.step(0.5) is False
        assert sched.step(0.5) is False
        assert sched.lr == 0.1

    def test_floor_is_respected(self):
        sched = self._make(lr=1e-6, patience=1)
        for _ in range(10):
            sched.step(1.0)
        assert sched.lr == 1e-6

    def test_tiny_improvement_does_not_count(self):
        sched = self._make(patience=2)
        sched.step(1.0)
        sched.step(1.0 - 1e-12)    # below min_delta: not an improvement
        assert sched.step(1.0 - 2e-12) is True


class TestEarlyStopper:
    def test_improving_never_stops(self):
        stop = EarlyStopper(patience=5)
        assert not any(stop.step(1.0 / (k + 1)) for k in range(50))

    def test_flat_stops_after_patience(self):
        stop = EarlyStopper(patience=3)
        assert stop.step(1.0) is False
        assert stop.step(1.0) is False
        assert stop.step(1.0) is False
        assert stop.step(1.0) is True

    def test_single_epoch_never_stops(self):
        assert EarlyStopper(patience=1).step(5.0) is False


class TestTrainHistory:
    def test_csv_round_trip(self, tmp_path):
        hist = TrainHistory()
        hist.append(1, 0.5, 0.25, 0.001)
        hist.append(2, 0.25, 0.125, 0.001)
        path = tmp_path / "h.csv"
        hist.write_csv(path)
        text = path.read_text()
        assert text.splitlines()[0] == "epoch,train_loss,val_mpjpe,lr"
        back = TrainHistory.read_csv(path)
        assert back.epochs == [1, 2]
        assert back.train_loss == [0.5, 0.25]
        assert back.val_mpjpe == [0.25, 0.125]
        assert back.lr == [0.001, 0.001]

    def test_bad_header(self, tmp_path):
        path = tmp_path / "h.csv"
        path.write_text("epoch,loss\n1,0.5\n")
        with pytest.raises(DatasetError) as err:
            TrainHistory.read_csv(path)
        assert err.value.line == 1

    def test_bad_row(self, tmp_path):
        path = tmp_path / "h.csv"
        path.write_text("epoch,train_loss,val_mpjpe,lr\n1,abc,0.2,0.001\n")
        with pytest.raises(DatasetError) as err:
            TrainHistory.read_csv(path)
        assert err.value.line == 2


class TestFit:
    def test_overfit_small_set(self):
        ds = overfit_sets()
        model = KeypointLifter(ModelConfig(n_max=6, dim=32, heads=2, layers=2), seed=0)
        cfg = TrainConfig(lr0=0.005, max_epochs=500, batch_size=32, seed=0)
        hist = fit(model, ds, ds, cfg)
        assert len(hist.epochs) <= 500
        ratio = hist.train_loss[0] / min(hist.train_loss)
        assert ratio >= 100.0
        assert hist.stop_reason in ("early_stop", "max_epochs")
        # lr trace never increases
        assert all(a >= b for a, b in zip(hist.lr, hist.lr[1:]))

    def test_rerun_is_bitwise_identical(self):
        ds = overfit_sets()
        cfg = TrainConfig(lr0=0.01, max_epochs=8, batch_size=16, seed=3)
        runs = []
        for _ in range(2):
            model = KeypointLifter(ModelConfig(n_max=6, dim=16, heads=2, layers=1),
                                   seed=1)
            hist = fit(model, ds, ds, cfg)
            runs.append((model, hist))
        (m1, h1), (m2, h2) = runs
        for a, b in zip(m1.state_dict().values(), m2.state_dict().values()):
            assert torch.equal(a, b)
        assert h1.train_loss == h2.train_loss
        assert h1.val_mpjpe == h2.val_mpjpe

    def test_best_weights_contract(self):
        ds = overfit_sets()
        cfg = TrainConfig(lr0=0.01, max_epochs=15, batch_size=16, seed=2)
        model = KeypointLifter(ModelConfig(n_max=6, dim=16, heads=2, layers=1), seed=4)
        hist = fit(model, ds, ds, cfg)
        restored = _validation_metric(model, ds, cfg)
        assert restored == pytest.approx(min(hist.val_mpjpe), abs=1e-12)
        assert hist.val_mpjpe[hist.best_epoch - 1] == min(hist.val_mpjpe)

    def test_canonical_loss_space_runs(self):
        ds = overfit_sets()
        cfg = TrainConfig(lr0=0.01, max_epochs=3, batch_size=16, seed=0,
                          loss_space="canonical_no_onp")
        model = KeypointLifter(ModelConfig(n_max=6, dim=16, heads=2, layers=1), seed=0)
        hist = fit(model, ds, ds, cfg)
        assert len(hist.epochs) == 3

    def test_missing_ground_truth_rejected(self):
        ds = overfit_sets()
        stripped = Dataset(samples=[Sample(w2d=s.w2d, s3d=None, mask=s.mask,
                                           adjacency=s.adjacency, category=s.category)
                                    for s in ds.samples],
                           n_max=ds.n_max, categories=ds.categories)
        model = KeypointLifter(ModelConfig(n_max=6, dim=16, heads=2, layers=1), seed=0)
        with pytest.raises(DatasetError):
            fit(model, stripped, ds, TrainConfig(max_epochs=1))
        with pytest.raises(DatasetError):
            fit(model, ds, Dataset(samples=[], n_max=6, categories=[]),
                TrainConfig(max_epochs=1))

    def test_numeric_fault_carries_history(self):
        ds = overfit_sets()
        model = KeypointLifter(ModelConfig(n_max=6, dim=8, heads=2, layers=1), seed=0)
        cfg = TrainConfig(lr0=1e200, max_epochs=10, batch_size=32, seed=0)
        with pytest.raises(NumericFault) as err:
            fit(model, ds, ds, cfg)
        assert hasattr(err.value, "history")
        assert isinstance(err.value.history, TrainHistory)


class LinearToy(nn.Module):
    """Minimal stand-in network: a single linear map of the raw coordinates."""

    def __init__(self):
        super().__init__()
        self.lin = nn.Linear(2, 3).double()

    @property
    def dtype(self):
        return torch.float64

    def forward(self, w2d, mask, adj):
        return self.lin(w2d)


def toy_sample(rng):
    return Sample(w2d=rng.standard_normal((4, 2)), s3d=None, mask=np.ones(4),
                  adjacency=edges_to_adjacency([(0, 1), (1, 2), (2, 3)], 4),
                  category="t")


class TestGradientCheck:
    def test_linear_toy_nearly_exact(self):
        # central differences are exact for linear maps up to roundoff
        rng = np.random.default_rng(5)
        report = gradient_check(LinearToy(), toy_sample(rng), eps=1e-3, atol=0.0)
        assert isinstance(report, GradCheckReport)
        assert report.max_rel_err < 1e-10
        assert report.passed

    def test_full_tiny_model(self):
        rng = np.random.default_rng(300)
        sample = toy_sample(rng)
        model = KeypointLifter(ModelConfig(n_max=4, dim=8, heads=2, layers=2), seed=0)
        report = gradient_check(model, sample, eps=1e-4, threshold=1e-4,
                                max_coords=10**9, seed=0)
        assert report.passed
        assert report.max_rel_err < 1e-4
        assert set(report.per_param) == {n for n, _ in model.named_parameters()}

    def test_subsampling_path(self):
        rng = np.random.default_rng(6)
        model = KeypointLifter(ModelConfig(n_max=4, dim=8, heads=2, layers=1), seed=0)
        report = gradient_check(model, toy_sample(rng), eps=1e-4, max_coords=5, seed=1)
        assert report.checked == sum(min(5, p.numel()) for p in model.parameters())
        assert report.passed

    def test_restores_parameters(self):
        rng = np.random.default_rng(7)
        model = KeypointLifter(ModelConfig(n_max=4, dim=8, heads=2, layers=1), seed=0)
        before = {k: v.clone() for k, v in model.state_dict().items()}
        gradient_check(model, toy_sample(rng), eps=1e-4, max_coords=3)
        for k, v in model.state_dict().items():
            assert torch.equal(before[k], v)

    def test_bad_arguments(self):
        rng = np.random.default_rng(8)
        model = KeypointLifter(ModelConfig(n_max=4, dim=8, heads=2, layers=1), seed=0)
        sample = toy_sample(rng)
        with pytest.raises(ConfigError):
            gradient_check(model, sample, eps=0.0)
        with pytest.raises(ConfigError):
            gradient_check(model, sample, eps=-1e-3)
        with pytest.raises(ConfigError):
            gradient_check(model, sample, atol=-1.0)
        with pytest.raises(ConfigError):
            gradient_check(model, sample, max_coords=0)


class TestTrainConfigFile:
    def test_load(self, tmp_path):
        path = tmp_path / "train.cfg"
        path.write_text(
            "lr0 = 0.005\n"
            "max_epochs = 50\n"
            "loss_space = canonical_no_onp\n"
            "seed = 9\n")
        cfg = load_train_config(path)
        assert cfg.lr0 == 0.005
        assert cfg.max_epochs == 50
        assert cfg.loss_space == "canonical_no_onp"
        assert cfg.seed == 9
        assert cfg.plateau_patience == 20    # untouched default

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "train.cfg"
        path.write_text("momentum = 0.9\n")
        with pytest.raises(ConfigError, match="unknown"):
            load_train_config(path)

    def test_bad_value(self, tmp_path):
        path = tmp_path / "train.cfg"
        path.write_text("lr0 = fast\n")
        with pytest.raises(ConfigError):
            load_train_config(path)
