"""Masked orthographic alignment of a canonical 3D prediction to a reference.

The optimal rotation comes from the SVD of the visible-row cross-covariance,
with the smallest singular direction sign-flipped when needed so the result is
a proper rotation (det +1), never a reflection. The optimal scale is the
closed-form least-squares ratio. Both solves ignore masked rows entirely.

Gradient behavior is selectable: ``stop`` (default) treats the solved rotation
and scale as constants so gradients reach the canonical shape only through the
final product, while ``full`` differentiates through the SVD as well.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .core import ConfigError, DegenerateGeometryError, InsufficientPointsError, ShapeError

GRAD_MODES = ("stop", "full")

# Relative threshold below which the second singular value marks a rank <= 1
# cross-covariance, i.e. an unidentifiable rotation.
_RANK_RTOL = 1e-12


@dataclass
class AlignmentResult:
    """Rotation, scale, aligned shape, and masked residual of one alignment."""

    rotation: torch.Tensor   # (..., 3, 3), proper rotation
    scale: torch.Tensor      # (...)
    aligned: torch.Tensor    # (..., N, 3)
    residual: torch.Tensor   # (...), masked Frobenius norm of reference - aligned


def _check_shapes(s_c: torch.Tensor, s_r: torch.Tensor, m: torch.Tensor) -> None:
    if s_c.shape[-1] != 3 or s_r.shape[-1] != 3:
        raise ShapeError("point sets must have a trailing dimension of 3")
    if s_c.shape != s_r.shape:
        raise ShapeError(f"point sets {tuple(s_c.shape)} and {tuple(s_r.shape)} differ")
    if m.shape != s_c.shape[:-1]:
        raise ShapeError(f"mask {tuple(m.shape)} does not match points {tuple(s_c.shape)}")


def cross_covariance(s_c: torch.Tensor, s_r: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    """Visible-row cross-covariance (..., 3, 3). Row masking of either operand
    is equivalent since the mask is binary; both are masked for symmetry."""
    mw = m.unsqueeze(-1)
    return (s_c * mw).transpose(-1, -2) @ (s_r * mw)


def solve_rotation(s_c: torch.Tensor, s_r: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    """Proper rotation R minimizing the masked Frobenius error of s_c @ R vs s_r.

    Requires at least 3 visible points and a rank >= 2 cross-covariance.
    """
    _check_shapes(s_c, s_r, m)
    n_vis = m.sum(dim=-1)
    if not bool((n_vis >= 3).all()):
        raise InsufficientPointsError(
            f"rotation solve needs >= 3 visible points, got {int(n_vis.min().item())}")
    c = cross_covariance(s_c, s_r, m)
    u, sv, vh = torch.linalg.svd(c)
    if not bool((sv[..., 1] > _RANK_RTOL * sv[..., 0]).all()):
        raise DegenerateGeometryError(
            "cross-covariance has rank <= 1; rotation is not identifiable")
    # Flip the weakest singular direction when U V^T would be a reflection.
    det = torch.linalg.det(u @ vh)
    flip = torch.ones_like(u[..., 0, :])
    flip[..., -1] = torch.sign(det).detach()
    return (u * flip.unsqueeze(-2)) @ vh


def solve_scale(s_c_rot: torch.Tensor, s_r: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    """Least-squares scale of an already-rotated shape onto the reference.

    Falls back to 1 when the rotated shape has zero visible norm.
    """
    _check_shapes(s_c_rot, s_r, m)
    mw = m.unsqueeze(-1)
    num = (s_c_rot * s_r * mw).sum(dim=(-1, -2))
    den = (s_c_rot.square() * mw).sum(dim=(-1, -2))
    safe = torch.where(den > 0, den, torch.ones_like(den))
    return torch.where(den > 0, num / safe, torch.ones_like(den))


def masked_residual(s_a: torch.Tensor, s_b: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    """Frobenius norm of the visible-row difference."""
    return ((s_a - s_b).square() * m.unsqueeze(-1)).sum(dim=(-1, -2)).sqrt()


def align(s_c: torch.Tensor, s_r: torch.Tensor, m: torch.Tensor,
          grad_mode: str = "stop") -> AlignmentResult:
    """Rotate then scale ``s_c`` onto ``s_r`` over the visible rows.

    With ``grad_mode='stop'`` the rotation and scale are solved without
    gradient tracking and enter the output as constants, so a downstream loss
    differentiates only the canonical shape's appearance in the product.
    ``'full'`` differentiates the whole solve, SVD included.
    """
    if grad_mode not in GRAD_MODES:
        raise ConfigError(f"grad_mode must be one of {GRAD_MODES}, got {grad_mode!r}")
    if grad_mode == "stop":
        with torch.no_grad():
            rotation = solve_rotation(s_c.detach(), s_r, m)
            scale = solve_scale(s_c.detach() @ rotation, s_r, m)
    else:
        rotation = solve_rotation(s_c, s_r, m)
        scale = solve_scale(s_c @ rotation, s_r, m)
    aligned = scale[..., None, None] * (s_c @ rotation)
    residual = masked_residual(s_r, aligned, m)
    return AlignmentResult(rotation=rotation, scale=scale, aligned=aligned, residual=residual)
