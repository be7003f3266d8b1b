"""The lifting network: token encoding, hybrid attention layers, shape decoder.

Every layer operates on a per-joint token sequence and respects two contracts
that the tests lean on heavily:

* permutation equivariance: relabeling joints (and permuting the mask and
  adjacency consistently) permutes the output rows the same way and changes
  nothing else;
* mask isolation: tokens of occluded joints are zeroed on entry and excluded
  from every attention neighborhood, so their stored coordinates cannot reach
  a visible joint's output, bitwise.

All parameter initialization is driven by a numpy generator so a (config,
seed) pair pins the model exactly; no global RNG state is consulted.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import ConfigError, NumericFault, Sample, ShapeError, preprocess_arrays
from .encoding import PHASE_DISTRIBUTIONS, IndexEmbedding, RFFParams, encode_rff, init_rff_params
from .procrustes import AlignmentResult, align

ATTN_MODES = ("hybrid", "ga_only", "mhsa_only")
ENCODINGS = ("tpe", "learnable")
PRECISIONS = ("f64", "f32")

# Additive score for forbidden attention targets. exp(-1e9) underflows to an
# exact 0.0, and the explicit mask multiply after softmax pins it regardless.
_NEG_INF = -1e9

_LEAKY_SLOPE = 0.2


@dataclass
class ModelConfig:
    """Architecture hyperparameters. ``n_max`` is the padded joint capacity a
    checkpoint was built for; only the learnable encoding is capacity-bound."""

    n_max: int
    dim: int = 64
    heads: int = 4
    layers: int = 4
    ff_mult: int = 4
    attn_mode: str = "hybrid"
    encoding: str = "tpe"
    rff_sigma: float = 1.0
    rff_seed: int = 0
    phase_dist: str = "uniform"
    precision: str = "f64"

    def __post_init__(self):
        if self.n_max < 1:
            raise ConfigError(f"n_max must be >= 1, got {self.n_max}")
        if self.dim < 2 or self.dim % 2 != 0:
            raise ConfigError(f"dim must be even and >= 2, got {self.dim}")
        if self.heads < 1:
            raise ConfigError(f"heads must be >= 1, got {self.heads}")
        if self.dim % (2 * self.heads) != 0:
            raise ConfigError(
                f"dim must be divisible by 2*heads, got dim={self.dim} heads={self.heads}")
        if self.layers < 1:
            raise ConfigError(f"layers must be >= 1, got {self.layers}")
        if self.ff_mult < 1:
            raise ConfigError(f"ff_mult must be >= 1, got {self.ff_mult}")
        if self.attn_mode not in ATTN_MODES:
            raise ConfigError(f"attn_mode must be one of {ATTN_MODES}, got {self.attn_mode!r}")
        if self.encoding not in ENCODINGS:
            raise ConfigError(f"encoding must be one of {ENCODINGS}, got {self.encoding!r}")
        if self.rff_sigma <= 0:
            raise ConfigError(f"rff_sigma must be positive, got {self.rff_sigma}")
        if self.phase_dist not in PHASE_DISTRIBUTIONS:
            raise ConfigError(
                f"phase_dist must be one of {PHASE_DISTRIBUTIONS}, got {self.phase_dist!r}")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {PRECISIONS}, got {self.precision!r}")

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.precision == "f64" else torch.float32


def _xavier(rng: np.random.Generator, shape: tuple[int, ...],
            fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def _fill(param: torch.Tensor, values: np.ndarray) -> None:
    with torch.no_grad():
        param.copy_(torch.from_numpy(np.ascontiguousarray(values)))


def _reset_linear(rng: np.random.Generator, layer: nn.Linear) -> None:
    _fill(layer.weight, _xavier(rng, tuple(layer.weight.shape),
                                layer.in_features, layer.out_features))
    if layer.bias is not None:
        _fill(layer.bias, np.zeros(layer.out_features))


class GraphAttention(nn.Module):
    """Single-head attention over the skeleton graph (self-loops included).

    Edge scores come from a leaky-ReLU of a learned vector dotted with the
    transformed endpoint features; softmax runs over each joint's visible
    neighborhood only.
    """

    def __init__(self, dim: int, out_dim: int):
        super().__init__()
        self.value = nn.Linear(dim, out_dim, bias=False)
        self.attn_src = nn.Parameter(torch.empty(out_dim))
        self.attn_dst = nn.Parameter(torch.empty(out_dim))

    def reset_parameters(self, rng: np.random.Generator) -> None:
        _reset_linear(rng, self.value)
        out_dim = self.attn_src.shape[0]
        _fill(self.attn_src, _xavier(rng, (out_dim,), 2 * out_dim, 1))
        _fill(self.attn_dst, _xavier(rng, (out_dim,), 2 * out_dim, 1))

    def forward(self, x: torch.Tensor, mask: torch.Tensor, adj: torch.Tensor) -> torch.Tensor:
        h = self.value(x)                                        # (..., N, F)
        n = x.shape[-2]
        eye = torch.eye(n, dtype=x.dtype, device=x.device)
        neighborhood = (adj + eye).clamp(max=1.0)
        allowed = neighborhood * mask.unsqueeze(-2)              # zero out masked columns
        src = h @ self.attn_src                                  # (..., N)
        dst = h @ self.attn_dst
        scores = F.leaky_relu(src.unsqueeze(-1) + dst.unsqueeze(-2), _LEAKY_SLOPE)
        scores = scores.masked_fill(allowed == 0, _NEG_INF)
        alpha = scores.softmax(dim=-1) * allowed
        return (alpha @ h) * mask.unsqueeze(-1)


class MultiHeadSelfAttention(nn.Module):
    """Scaled dot-product attention over all visible joints."""

    def __init__(self, dim: int, out_dim: int, heads: int):
        super().__init__()
        if out_dim % heads != 0:
            raise ConfigError(f"attention width {out_dim} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = out_dim // heads
        self.query = nn.Linear(dim, out_dim)
        self.key = nn.Linear(dim, out_dim)
        self.value = nn.Linear(dim, out_dim)
        self.out = nn.Linear(out_dim, out_dim)

    def reset_parameters(self, rng: np.random.Generator) -> None:
        for layer in (self.query, self.key, self.value, self.out):
            _reset_linear(rng, layer)

    def _split(self, t: torch.Tensor) -> torch.Tensor:
        # (..., N, H*d) -> (..., H, N, d)
        return t.unflatten(-1, (self.heads, self.head_dim)).transpose(-3, -2)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        q = self._split(self.query(x))
        k = self._split(self.key(x))
        v = self._split(self.value(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)   # (..., H, N, N)
        key_ok = mask.unsqueeze(-2).unsqueeze(-3)                     # (..., 1, 1, N)
        scores = scores.masked_fill(key_ok == 0, _NEG_INF)
        alpha = scores.softmax(dim=-1) * key_ok
        ctx = (alpha @ v).transpose(-3, -2).flatten(-2)               # (..., N, H*d)
        return self.out(ctx) * mask.unsqueeze(-1)


class HybridLayer(nn.Module):
    """One block: graph + global attention in parallel, then a GeLU MLP.

    Both sublayers use the same post-norm residual: the normalized output is
    added back to the unnormalized one. Occluded rows are re-zeroed on exit so
    the layer norm biases never leak constants into them.
    """

    def __init__(self, dim: int, heads: int, ff_mult: int, attn_mode: str):
        super().__init__()
        self.attn_mode = attn_mode
        if attn_mode == "hybrid":
            self.graph_attn = GraphAttention(dim, dim // 2)
            self.self_attn = MultiHeadSelfAttention(dim, dim // 2, heads)
        elif attn_mode == "ga_only":
            self.graph_attn = GraphAttention(dim, dim)
            self.self_attn = None
        else:
            self.graph_attn = None
            self.self_attn = MultiHeadSelfAttention(dim, dim, heads)
        self.norm_attn = nn.LayerNorm(dim, eps=1e-5)
        self.ff_in = nn.Linear(dim, ff_mult * dim)
        self.ff_out = nn.Linear(ff_mult * dim, dim)
        self.norm_ff = nn.LayerNorm(dim, eps=1e-5)

    def reset_parameters(self, rng: np.random.Generator) -> None:
        if self.graph_attn is not None:
            self.graph_attn.reset_parameters(rng)
        if self.self_attn is not None:
            self.self_attn.reset_parameters(rng)
        for norm in (self.norm_attn, self.norm_ff):
            _fill(norm.weight, np.ones(norm.weight.shape[0]))
            _fill(norm.bias, np.zeros(norm.bias.shape[0]))
        _reset_linear(rng, self.ff_in)
        _reset_linear(rng, self.ff_out)

    def forward(self, x: torch.Tensor, mask: torch.Tensor, adj: torch.Tensor) -> torch.Tensor:
        if self.attn_mode == "hybrid":
            u = torch.cat([self.graph_attn(x, mask, adj), self.self_attn(x, mask)], dim=-1)
        elif self.attn_mode == "ga_only":
            u = self.graph_attn(x, mask, adj)
        else:
            u = self.self_attn(x, mask)
        x_attn = self.norm_attn(u) + u
        y = self.ff_out(F.gelu(self.ff_in(x_attn)))
        return (self.norm_ff(y) + x_attn) * mask.unsqueeze(-1)


class ShapeDecoder(nn.Module):
    """Per-token MLP from feature space to a 3D coordinate."""

    def __init__(self, dim: int):
        super().__init__()
        self.hidden = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, 3)

    def reset_parameters(self, rng: np.random.Generator) -> None:
        _reset_linear(rng, self.hidden)
        _reset_linear(rng, self.out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.out(F.gelu(self.hidden(x)))


class KeypointLifter(nn.Module):
    """End-to-end network: preprocess, encode, attend, decode.

    ``forward`` returns the canonical-frame 3D shape; orientation against a
    reference is recovered separately (see :func:`lift3d.procrustes.align`).
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        if config.encoding == "learnable":
            self.embed = IndexEmbedding(config.n_max, config.dim, rng)
            self.register_buffer("rff_omega", torch.zeros(0))
            self.register_buffer("rff_phase", torch.zeros(0))
        else:
            self.embed = None
            p = init_rff_params(config.dim, config.rff_sigma, config.rff_seed,
                                config.phase_dist)
            # Frozen by construction: buffers, never parameters.
            self.register_buffer("rff_omega", p.omega)
            self.register_buffer("rff_phase", p.phase)
        self.blocks = nn.ModuleList(
            HybridLayer(config.dim, config.heads, config.ff_mult, config.attn_mode)
            for _ in range(config.layers))
        self.decoder = ShapeDecoder(config.dim)
        self.double()
        for block in self.blocks:
            block.reset_parameters(rng)
        self.decoder.reset_parameters(rng)
        if config.precision == "f32":
            self.float()

    @property
    def dtype(self) -> torch.dtype:
        return self.config.torch_dtype

    def _check_inputs(self, w: torch.Tensor, m: torch.Tensor, a: torch.Tensor) -> None:
        if w.shape[-1] != 2:
            raise ShapeError(f"2D input must end in 2 coordinates, got {tuple(w.shape)}")
        if m.shape != w.shape[:-1]:
            raise ShapeError(f"mask {tuple(m.shape)} does not match input {tuple(w.shape)}")
        n = w.shape[-2]
        if a.shape[-2:] != (n, n):
            raise ShapeError(f"adjacency {tuple(a.shape)} does not match {n} joints")
        if a.shape[:-2] not in ((), m.shape[:-1]):
            raise ShapeError(f"adjacency batch shape {tuple(a.shape[:-2])} is incompatible")
        if not torch.equal(a, a.transpose(-1, -2)):
            raise ShapeError("adjacency must be symmetric")

    def encode(self, w_n: torch.Tensor) -> torch.Tensor:
        if self.embed is not None:
            return self.embed(w_n)
        params = RFFParams(omega=self.rff_omega, phase=self.rff_phase,
                           dim=self.config.dim, sigma=self.config.rff_sigma,
                           seed=self.config.rff_seed, phase_dist=self.config.phase_dist)
        return encode_rff(w_n, params)

    def forward(self, w2d, mask, adj) -> torch.Tensor:
        dt = self.dtype
        w = torch.as_tensor(w2d, dtype=dt) if not torch.is_tensor(w2d) else w2d.to(dt)
        m = torch.as_tensor(mask, dtype=dt) if not torch.is_tensor(mask) else mask.to(dt)
        a = torch.as_tensor(adj, dtype=dt) if not torch.is_tensor(adj) else adj.to(dt)
        self._check_inputs(w, m, a)
        w_n, _ = preprocess_arrays(w, m)
        x = self.encode(w_n) * m.unsqueeze(-1)
        for block in self.blocks:
            x = block(x, m, a)
        return self.decoder(x)


def lift_sample(model: KeypointLifter, sample: Sample) -> tuple[torch.Tensor, AlignmentResult | None]:
    """Run one sample through the network; align to its reference if present."""
    with torch.no_grad():
        canon = model(sample.w2d, sample.mask, sample.adjacency)
    if sample.s3d is None:
        return canon, None
    result = align(canon, sample.s3d.to(canon.dtype), sample.mask.to(canon.dtype))
    return canon, result


def backward(model: KeypointLifter, w2d, mask, adj, upstream) -> dict[str, torch.Tensor]:
    """Per-parameter gradients of ``sum(output * upstream)``.

    ``upstream`` plays the role of d(loss)/d(output); contracting with it makes
    the vector-Jacobian product explicit and keeps the interface loss-agnostic.
    Raises :class:`NumericFault` naming the first parameter with a non-finite
    gradient.
    """
    out = model(w2d, mask, adj)
    up = torch.as_tensor(upstream, dtype=out.dtype)
    if up.shape != out.shape:
        raise ShapeError(f"upstream {tuple(up.shape)} does not match output {tuple(out.shape)}")
    names, params = zip(*model.named_parameters())
    grads = torch.autograd.grad((out * up).sum(), params, allow_unused=True)
    result: dict[str, torch.Tensor] = {}
    for name, param, grad in zip(names, params, grads):
        if grad is None:
            grad = torch.zeros_like(param)
        if not bool(torch.isfinite(grad).all()):
            raise NumericFault(f"non-finite gradient in {name}", tensor_name=name)
        result[name] = grad.detach()
    return result


_DTYPE_CODES = {torch.float64: "f64", torch.float32: "f32"}
_NUMPY_CODES = {"f64": "<f8", "f32": "<f4"}


def save_checkpoint(model: KeypointLifter, directory) -> None:
    """Write ``manifest.json`` (config + tensor table) and ``weights.bin``
    (raw little-endian row-major payload, tensors back to back)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    blobs = []
    offset = 0
    for name, tensor in model.state_dict().items():
        code = _DTYPE_CODES.get(tensor.dtype)
        if code is None:
            raise ConfigError(f"tensor {name} has unsupported dtype {tensor.dtype}")
        raw = np.ascontiguousarray(tensor.detach().cpu().numpy(),
                                   dtype=_NUMPY_CODES[code]).tobytes()
        entries.append({"tensor_name": name, "shape": list(tensor.shape),
                        "dtype": code, "byte_offset": offset})
        offset += len(raw)
        blobs.append(raw)
    manifest = {"config": asdict(model.config), "tensors": entries}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    (directory / "weights.bin").write_bytes(b"".join(blobs))


def load_checkpoint(directory) -> KeypointLifter:
    """Rebuild a model from :func:`save_checkpoint` output, byte for byte.

    The payload length must match the manifest exactly; offsets must be
    contiguous and every model tensor present.
    """
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"unreadable checkpoint manifest: {exc}") from exc
    if not isinstance(manifest, dict) or "config" not in manifest or "tensors" not in manifest:
        raise ConfigError("checkpoint manifest must carry 'config' and 'tensors'")
    try:
        config = ModelConfig(**manifest["config"])
    except TypeError as exc:
        raise ConfigError(f"bad checkpoint config: {exc}") from exc
    model = KeypointLifter(config)
    raw = (directory / "weights.bin").read_bytes()
    state: dict[str, torch.Tensor] = {}
    expected = 0
    for entry in manifest["tensors"]:
        shape = tuple(int(s) for s in entry["shape"])
        dtype = _NUMPY_CODES.get(entry["dtype"])
        if dtype is None:
            raise ConfigError(f"unknown tensor dtype {entry['dtype']!r} in manifest")
        if int(entry["byte_offset"]) != expected:
            raise ConfigError(f"tensor {entry['tensor_name']} at non-contiguous offset")
        count = int(np.prod(shape)) if shape else 1
        try:
            arr = np.frombuffer(raw, dtype=dtype, count=count, offset=expected)
        except ValueError as exc:
            raise ConfigError(f"weight payload too short for {entry['tensor_name']}") from exc
        state[entry["tensor_name"]] = torch.from_numpy(arr.copy().reshape(shape))
        expected += count * np.dtype(dtype).itemsize
    if len(raw) != expected:
        raise ConfigError(f"weight payload is {len(raw)} bytes, manifest expects {expected}")
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise ConfigError(f"checkpoint does not match its declared config: {exc}") from exc
    return model
