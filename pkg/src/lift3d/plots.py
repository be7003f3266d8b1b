"""Figure rendering (headless). All functions write a file and return None."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import torch

from .core import Sample
from .evaluate import EvalReport
from .train import TrainHistory

_GT_STYLE = dict(color="tab:red", linestyle="-", marker="o", markersize=4)
_PRED_STYLE = dict(color="tab:blue", linestyle="--", marker="^", markersize=4)


def plot_history(history: TrainHistory, path) -> None:
    """Loss and validation curves on top, learning rate below."""
    fig, (ax_top, ax_lr) = plt.subplots(
        2, 1, figsize=(7, 5.5), sharex=True,
        gridspec_kw={"height_ratios": [3, 1]})
    ax_top.plot(history.epochs, history.train_loss, label="train loss", color="tab:blue")
    ax_top.plot(history.epochs, history.val_mpjpe, label="val MPJPE", color="tab:orange")
    if history.best_epoch:
        ax_top.axvline(history.best_epoch, color="gray", linewidth=0.8, linestyle=":",
                       label=f"best epoch ({history.best_epoch})")
    ax_top.set_yscale("log")
    ax_top.set_ylabel("value")
    ax_top.legend(loc="upper right", fontsize=8)
    ax_top.grid(True, alpha=0.3)
    ax_lr.step(history.epochs, history.lr, where="post", color="tab:green")
    ax_lr.set_yscale("log")
    ax_lr.set_xlabel("epoch")
    ax_lr.set_ylabel("lr")
    ax_lr.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def _edges_of(sample: Sample) -> list[tuple[int, int]]:
    a = sample.adjacency
    idx = torch.triu(a, diagonal=1).nonzero()
    return [(int(i), int(j)) for i, j in idx.tolist()]


def _draw_view(ax, points: np.ndarray, mask: np.ndarray,
               edges: list[tuple[int, int]], cols: tuple[int, int], style: dict) -> None:
    base = {k: v for k, v in style.items() if k not in ("marker", "markersize")}
    for i, j in edges:
        if mask[i] > 0 and mask[j] > 0:
            ax.plot(points[[i, j], cols[0]], points[[i, j], cols[1]],
                    linewidth=1.2, **base)
    vis = mask > 0
    ax.plot(points[vis, cols[0]], points[vis, cols[1]], linestyle="none",
            marker=style["marker"], markersize=style["markersize"], color=style["color"])


def plot_shape(sample: Sample, pred, path, title: str | None = None) -> None:
    """Two orthographic stick-figure views (front and top) of prediction
    against ground truth. Edges touching an occluded joint are not drawn;
    samples without ground truth show the prediction alone."""
    pred = np.asarray(torch.as_tensor(pred, dtype=torch.float64))
    mask = np.asarray(sample.mask)
    edges = _edges_of(sample)
    gt = None if sample.s3d is None else np.asarray(sample.s3d)
    fig, axes = plt.subplots(1, 2, figsize=(8, 4))
    for ax, cols, name in zip(axes, [(0, 1), (0, 2)], ["front (x-y)", "top (x-z)"]):
        if gt is not None:
            _draw_view(ax, gt, mask, edges, cols, _GT_STYLE)
        _draw_view(ax, pred, mask, edges, cols, _PRED_STYLE)
        ax.set_title(name, fontsize=9)
        ax.set_aspect("equal", adjustable="datalim")
        ax.grid(True, alpha=0.3)
    handles = []
    if gt is not None:
        handles.append(plt.Line2D([], [], label="reference", **_GT_STYLE))
    handles.append(plt.Line2D([], [], label="prediction", **_PRED_STYLE))
    fig.legend(handles=handles, loc="lower center", ncol=2, fontsize=8, frameon=False)
    fig.suptitle(title or sample.category, fontsize=10)
    fig.tight_layout(rect=(0, 0.06, 1, 0.96))
    fig.savefig(path)
    plt.close(fig)


def plot_report(report: EvalReport, path) -> None:
    """Per-category bars for both metrics, overall drawn last."""
    names = list(report.categories) + ["overall"]
    metrics = list(report.categories.values()) + [report.overall]
    x = np.arange(len(names))
    width = 0.38
    fig, ax = plt.subplots(figsize=(max(5.0, 1.1 * len(names) + 2), 4))
    ax.bar(x - width / 2, [m.mpjpe for m in metrics], width,
           label="MPJPE", color="tab:blue")
    ax.bar(x + width / 2, [m.pa_mpjpe for m in metrics], width,
           label="PA-MPJPE", color="tab:orange")
    ax.set_xticks(x, names, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("error")
    ax.legend(fontsize=8)
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
