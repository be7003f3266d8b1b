"""Evaluation metrics and per-category reporting.

Two numbers per sample, both in ground-truth units and both over visible
joints only:

* ``mpjpe``: mean joint error after the rotation+scale fit of the canonical
  prediction onto the reference (no translation; both shapes as-is);
* ``pa_mpjpe``: mean joint error after full alignment, where both shapes are
  first centered on their visible centroid, then rotation+scale fitted.

Aggregation is a plain mean over samples, per category and overall.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import torch

from .core import DatasetError
from .data import Dataset, pad_batch
from .procrustes import align


def per_sample_mpjpe(pred: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean Euclidean joint error over visible joints, per sample (...)."""
    dist = (pred - gt).square().sum(dim=-1).sqrt()
    return (dist * mask).sum(dim=-1) / mask.sum(dim=-1)


def center_visible(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Subtract the visible-joint centroid; re-zero the masked rows."""
    centroid = (x * mask.unsqueeze(-1)).sum(dim=-2) / mask.sum(dim=-1, keepdim=True)
    return (x - centroid.unsqueeze(-2)) * mask.unsqueeze(-1)


def per_sample_aligned_mpjpe(pred: torch.Tensor, gt: torch.Tensor,
                             mask: torch.Tensor) -> torch.Tensor:
    """MPJPE after fitting rotation and scale of pred onto gt (no translation)."""
    result = align(pred, gt, mask, grad_mode="stop")
    return per_sample_mpjpe(result.aligned, gt, mask)


def per_sample_pa_mpjpe(pred: torch.Tensor, gt: torch.Tensor,
                        mask: torch.Tensor) -> torch.Tensor:
    """MPJPE after centering both shapes and fitting rotation and scale."""
    pred_c = center_visible(pred, mask)
    gt_c = center_visible(gt, mask)
    result = align(pred_c, gt_c, mask, grad_mode="stop")
    return per_sample_mpjpe(result.aligned, gt_c, mask)


def mpjpe(pred: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor) -> float:
    return float(per_sample_mpjpe(pred, gt, mask).mean().item())


def pa_mpjpe(pred: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor) -> float:
    return float(per_sample_pa_mpjpe(pred, gt, mask).mean().item())


@dataclass
class CategoryMetrics:
    count: int
    mpjpe: float
    pa_mpjpe: float


@dataclass
class EvalReport:
    categories: dict[str, CategoryMetrics]
    overall: CategoryMetrics

    def to_json(self) -> str:
        payload = {
            "overall": vars(self.overall),
            "categories": {name: vars(m) for name, m in self.categories.items()},
        }
        return json.dumps(payload, indent=2) + "\n"

    def to_text(self) -> str:
        width = max([len("category"), len("overall")]
                    + [len(name) for name in self.categories])
        lines = [f"{'category':<{width}}  {'count':>7}  {'mpjpe':>10}  {'pa_mpjpe':>10}"]
        rows = list(self.categories.items()) + [("overall", self.overall)]
        for name, m in rows:
            lines.append(f"{name:<{width}}  {m.count:>7d}  {m.mpjpe:>10.6f}  {m.pa_mpjpe:>10.6f}")
        return "\n".join(lines) + "\n"


def evaluate(model, dataset: Dataset, batch_size: int = 64) -> EvalReport:
    """Run the model over a dataset and aggregate both metrics per category."""
    if not dataset.samples:
        raise DatasetError("cannot evaluate an empty dataset")
    for s in dataset.samples:
        if s.s3d is None:
            raise DatasetError("evaluation needs ground truth on every sample")
    onp_values: list[float] = []
    pa_values: list[float] = []
    cats: list[str] = []
    with torch.no_grad():
        for start in range(0, len(dataset.samples), batch_size):
            batch = dataset.samples[start:start + batch_size]
            w2d, mask, adj, s3d = pad_batch(batch)
            pred = model(w2d, mask, adj)
            mask = mask.to(pred.dtype)
            s3d = s3d.to(pred.dtype)
            onp_values.extend(per_sample_aligned_mpjpe(pred, s3d, mask).tolist())
            pa_values.extend(per_sample_pa_mpjpe(pred, s3d, mask).tolist())
            cats.extend(s.category for s in batch)
    order = list(dataset.categories)
    for c in cats:
        if c not in order:
            order.append(c)
    by_cat: dict[str, CategoryMetrics] = {}
    for name in order:
        idx = [i for i, c in enumerate(cats) if c == name]
        if not idx:
            continue
        by_cat[name] = CategoryMetrics(
            count=len(idx),
            mpjpe=sum(onp_values[i] for i in idx) / len(idx),
            pa_mpjpe=sum(pa_values[i] for i in idx) / len(idx))
    overall = CategoryMetrics(count=len(cats),
                              mpjpe=sum(onp_values) / len(cats),
                              pa_mpjpe=sum(pa_values) / len(cats))
    return EvalReport(categories=by_cat, overall=overall)
