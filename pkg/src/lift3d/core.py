"""Keypoint containers, error types, and the deterministic 2D preprocessing chain.

Array conventions used across the package:

    2D keypoints   float tensor (..., N, 2)
    3D keypoints   float tensor (..., N, 3)
    visibility     float tensor (..., N), entries exactly 0.0 or 1.0
    adjacency      float tensor (..., N, N), binary and symmetric

Leading batch dimensions are optional; every preprocessing function broadcasts
over them. Masked rows are kept exactly zero through every stage so occluded
or padded joints can never leak into visible ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch


class LiftError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(LiftError):
    """Array dimensions do not agree with the documented conventions."""


class EmptyMaskError(LiftError):
    """An operation that needs at least one visible keypoint got none."""


class ConfigError(LiftError):
    """Invalid configuration value or malformed config file."""


class InsufficientPointsError(LiftError):
    """Fewer visible points than the operation requires."""


class DegenerateGeometryError(LiftError):
    """Point geometry does not determine the requested quantity."""


class DatasetError(LiftError):
    """Malformed dataset file or invalid sample."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class NumericFault(LiftError):
    """A non-finite value appeared where it must not (carries the tensor name)."""

    def __init__(self, message: str, tensor_name: str = ""):
        super().__init__(message)
        self.tensor_name = tensor_name


def as_f64(x) -> torch.Tensor:
    return torch.as_tensor(x, dtype=torch.float64)


@dataclass
class Sample:
    """One training or inference instance.

    ``s3d`` is the camera-frame ground truth and may be None at inference.
    All arrays share the joint count N; ``adjacency`` is binary and symmetric.
    """

    w2d: torch.Tensor
    s3d: torch.Tensor | None
    mask: torch.Tensor
    adjacency: torch.Tensor
    category: str

    def __post_init__(self):
        self.w2d = as_f64(self.w2d)
        self.s3d = as_f64(self.s3d) if self.s3d is not None else None
        self.mask = as_f64(self.mask)
        self.adjacency = as_f64(self.adjacency)

    @property
    def n_joints(self) -> int:
        return self.w2d.shape[0]

    @property
    def n_visible(self) -> int:
        return int(self.mask.sum().item())


@dataclass
class PreprocessRecord:
    """Statistics removed from the 2D input: visible centroid and scale."""

    centroid: torch.Tensor  # (..., 2)
    scale: torch.Tensor     # (...)


def validate_sample(sample: Sample, min_visible: int = 3, require_gt: bool = False) -> None:
    """Check the type invariants of one sample; raises DatasetError on violation."""
    n = sample.n_joints
    if sample.w2d.ndim != 2 or sample.w2d.shape[1] != 2:
        raise DatasetError(f"w2d must be (N, 2), got {tuple(sample.w2d.shape)}")
    if not torch.isfinite(sample.w2d).all():
        raise DatasetError("non-finite 2D coordinates")
    if sample.mask.shape != (n,):
        raise DatasetError(f"mask length {tuple(sample.mask.shape)} != joint count {n}")
    if not torch.all((sample.mask == 0) | (sample.mask == 1)):
        raise DatasetError("mask entries must be 0 or 1")
    if sample.n_visible < min_visible:
        raise DatasetError(f"sample has {sample.n_visible} visible joints, needs >= {min_visible}")
    if sample.adjacency.shape != (n, n):
        raise DatasetError(f"adjacency shape {tuple(sample.adjacency.shape)} != ({n}, {n})")
    if not torch.all((sample.adjacency == 0) | (sample.adjacency == 1)):
        raise DatasetError("adjacency entries must be 0 or 1")
    if not torch.equal(sample.adjacency, sample.adjacency.T):
        raise DatasetError("adjacency must be symmetric")
    if sample.s3d is None:
        if require_gt:
            raise DatasetError("sample is missing 3D ground truth")
    else:
        if sample.s3d.shape != (n, 3):
            raise DatasetError(f"s3d shape {tuple(sample.s3d.shape)} != ({n}, 3)")
        if not torch.isfinite(sample.s3d).all():
            raise DatasetError("non-finite 3D coordinates")


def _check_pair(w: torch.Tensor, m: torch.Tensor) -> None:
    if w.shape[-1] != 2:
        raise ShapeError(f"keypoints must have a trailing dimension of 2, got {w.shape[-1]}")
    if w.shape[:-1] != m.shape:
        raise ShapeError(f"keypoints {tuple(w.shape)} and mask {tuple(m.shape)} do not agree")


def apply_mask(w: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    """Zero out the rows of ``w`` whose mask entry is 0."""
    _check_pair(w, m)
    return w * m.unsqueeze(-1)


def zero_center(w_m: torch.Tensor, m: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Subtract the centroid of the visible rows; masked rows stay exactly zero.

    Returns the centered keypoints and the centroid (..., 2).
    """
    _check_pair(w_m, m)
    n_vis = m.sum(dim=-1)
    if not bool((n_vis > 0).all()):
        raise EmptyMaskError("cannot center a keypoint set with no visible points")
    centroid = (w_m * m.unsqueeze(-1)).sum(dim=-2) / n_vis.unsqueeze(-1)
    w_c = (w_m - centroid.unsqueeze(-2)) * m.unsqueeze(-1)
    return w_c, centroid


def normalize_scale(w_c: torch.Tensor, m: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Divide both coordinates by the largest visible |coordinate|.

    A single scalar per sample keeps the aspect ratio; afterwards the largest
    visible |coordinate| is exactly 1. If every visible point sits at the
    origin the input is returned unchanged and the scale is recorded as 1.
    """
    _check_pair(w_c, m)
    extent = (w_c.abs() * m.unsqueeze(-1)).amax(dim=(-2, -1))
    scale = torch.where(extent > 0, extent, torch.ones_like(extent))
    w_n = (w_c / scale[..., None, None]) * m.unsqueeze(-1)
    return w_n, scale


def preprocess_arrays(w: torch.Tensor, m: torch.Tensor) -> tuple[torch.Tensor, PreprocessRecord]:
    """Mask, zero-center, and scale-normalize raw 2D keypoints."""
    w_m = apply_mask(w, m)
    w_c, centroid = zero_center(w_m, m)
    w_n, scale = normalize_scale(w_c, m)
    return w_n, PreprocessRecord(centroid=centroid, scale=scale)


def preprocess(sample: Sample) -> tuple[torch.Tensor, PreprocessRecord]:
    """Preprocess one sample's 2D keypoints (see :func:`preprocess_arrays`)."""
    return preprocess_arrays(sample.w2d, sample.mask)


def edges_to_adjacency(edges, n: int) -> torch.Tensor:
    """Build a binary symmetric (n, n) adjacency matrix from an (i, j) edge list."""
    a = torch.zeros((n, n), dtype=torch.float64)
    for i, j in edges:
        i, j = int(i), int(j)
        if not (0 <= i < n and 0 <= j < n):
            raise ShapeError(f"edge ({i}, {j}) out of range for {n} joints")
        a[i, j] = 1.0
        a[j, i] = 1.0
    return a


def adjacency_to_edges(a: torch.Tensor) -> list[list[int]]:
    """Inverse of :func:`edges_to_adjacency`; returns sorted [i, j] pairs with i < j."""
    n = a.shape[0]
    idx = torch.triu(a, diagonal=1).nonzero()
    return [[int(i), int(j)] for i, j in idx.tolist()]


def parse_kv_lines(text: str) -> dict[str, str]:
    """Parse flat ``key = value`` config text.

    Blank lines and ``#`` comments are ignored; duplicate keys and lines
    without ``=`` are errors. Values come back as raw strings.
    """
    out: dict[str, str] = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected 'key = value', got {raw.strip()!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError(f"line {ln}: empty key")
        if key in out:
            raise ConfigError(f"line {ln}: duplicate key {key!r}")
        out[key] = value
    return out
