"""Per-token positional features for preprocessed 2D keypoints.

Two interchangeable encoders feed the transformer:

* ``tpe``: frozen random Fourier features of the coordinates. Purely
  row-wise, so it is exactly permutation-equivariant and carries no joint
  identity, which is what lets one model serve rigs it never saw.
* ``learnable``: a trainable per-index embedding table plus a linear map of
  the coordinates. This ties features to token positions and is kept only as
  the ablation baseline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .core import ConfigError, ShapeError

PHASE_DISTRIBUTIONS = ("uniform", "normal")


@dataclass(frozen=True)
class RFFParams:
    """Frozen random Fourier projection; sampled once, never trained.

    ``omega`` is (2, D/2) with entries Normal(0, sigma^2); ``phase`` is (D/2,)
    drawn from the configured distribution. Fully determined by the seed.
    """

    omega: torch.Tensor
    phase: torch.Tensor
    dim: int
    sigma: float
    seed: int
    phase_dist: str = "uniform"


def init_rff_params(dim: int, sigma: float = 1.0, seed: int = 0,
                    phase_dist: str = "uniform") -> RFFParams:
    if dim < 2 or dim % 2 != 0:
        raise ConfigError(f"feature dimension must be even and >= 2, got {dim}")
    if sigma <= 0:
        raise ConfigError(f"frequency scale must be positive, got {sigma}")
    if phase_dist not in PHASE_DISTRIBUTIONS:
        raise ConfigError(f"phase_dist must be one of {PHASE_DISTRIBUTIONS}, got {phase_dist!r}")
    rng = np.random.default_rng(seed)
    omega = rng.normal(0.0, sigma, size=(2, dim // 2))
    if phase_dist == "uniform":
        phase = rng.uniform(0.0, 2.0 * math.pi, size=dim // 2)
    else:
        phase = rng.normal(0.0, 1.0, size=dim // 2)
    return RFFParams(
        omega=torch.from_numpy(omega),
        phase=torch.from_numpy(phase),
        dim=dim,
        sigma=float(sigma),
        seed=int(seed),
        phase_dist=phase_dist,
    )


def encode_rff(w_n: torch.Tensor, params: RFFParams) -> torch.Tensor:
    """Map (..., N, 2) coordinates to (..., N, D) Fourier features.

    Columns 1..D/2 hold the sin branch, D/2+1..D the cos branch; every entry
    lies in [-sqrt(2/D), sqrt(2/D)]. Row-wise, hence permutation-equivariant.
    """
    if w_n.shape[-1] != 2:
        raise ShapeError(f"expected (..., N, 2) coordinates, got trailing dim {w_n.shape[-1]}")
    omega = params.omega.to(w_n.dtype)
    phase = params.phase.to(w_n.dtype)
    z = w_n @ omega + phase
    return math.sqrt(2.0 / params.dim) * torch.cat([torch.sin(z), torch.cos(z)], dim=-1)


class IndexEmbedding(nn.Module):
    """Trainable per-index table plus a 2 -> D linear map of the coordinates.

    Feature row i is table[i] + linear(w[i]), so features are tied to token
    order: permuting the input rows does NOT permute the output rows. Kept as
    the correspondence-encoding baseline that the Fourier encoder replaces.
    """

    def __init__(self, n_max: int, dim: int, rng: np.random.Generator):
        super().__init__()
        self.n_max = n_max
        self.dim = dim
        self.table = nn.Parameter(torch.from_numpy(rng.normal(0.0, 0.02, size=(n_max, dim))))
        bound = math.sqrt(6.0 / (2 + dim))
        self.coord_weight = nn.Parameter(torch.from_numpy(rng.uniform(-bound, bound, size=(2, dim))))
        self.coord_bias = nn.Parameter(torch.zeros(dim, dtype=torch.float64))

    def forward(self, w_n: torch.Tensor) -> torch.Tensor:
        n = w_n.shape[-2]
        if n > self.n_max:
            raise ConfigError(f"{n} tokens exceed the embedding capacity {self.n_max}")
        return self.table[:n] + w_n @ self.coord_weight + self.coord_bias
