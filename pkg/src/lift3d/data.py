"""Synthetic deformable-shape data: category library, generation, JSONL I/O.

Each category is a basis-shape model: a centered mean shape of unit RMS radius
plus a small bank of centered deformation bases. A sample draws basis
coefficients, a uniform random rotation, projects orthographically (drop the
depth axis), adds pixel noise, and re-draws an i.i.d. visibility mask until at
least ``min_visible`` joints survive.

The stored ground truth is the camera-frame shape (deformed shape, rotated),
so the depth coordinate of the ground truth is exactly what the projection
discarded.

Category geometry is keyed by the category's name alone (crc32-seeded), so
``chain8`` means the same skeleton in every dataset; per-dataset randomness
lives entirely in the generation seed.
"""

from __future__ import annotations

import json
import logging
import re
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .core import (ConfigError, DatasetError, LiftError, Sample, ShapeError,
                   adjacency_to_edges, edges_to_adjacency, parse_kv_lines, validate_sample)

log = logging.getLogger(__name__)

CHAIN_SIZES = (5, 17)
STAR_SIZES = (8, 20)

# Joint order: pelvis, spine, neck, head_top, nose, then left arm, right arm,
# left leg, right leg.
HUMANOID17_EDGES = [
    (0, 1), (1, 2), (2, 3), (2, 4),
    (2, 5), (5, 6), (6, 7),
    (2, 8), (8, 9), (9, 10),
    (0, 11), (11, 12), (12, 13),
    (0, 14), (14, 15), (15, 16),
]

# 15-joint rig: drop the spine and head_top joints, bridge the gaps.
HUMANOID15_KEEP = [0, 2, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16]
HUMANOID15_EDGES = [
    (0, 1), (1, 2),
    (1, 3), (3, 4), (4, 5),
    (1, 6), (6, 7), (7, 8),
    (0, 9), (9, 10), (10, 11),
    (0, 12), (12, 13), (13, 14),
]

_HUMANOID17_POINTS = np.array([
    [0.00, 0.00, 0.00],    # pelvis
    [0.00, 0.40, 0.00],    # spine
    [0.00, 0.80, 0.00],    # neck
    [0.00, 1.05, 0.00],    # head_top
    [0.00, 0.92, 0.08],    # nose
    [0.22, 0.78, 0.00],    # l_shoulder
    [0.45, 0.55, 0.02],    # l_elbow
    [0.65, 0.35, 0.05],    # l_wrist
    [-0.22, 0.78, 0.00],   # r_shoulder
    [-0.45, 0.55, 0.02],   # r_elbow
    [-0.65, 0.35, 0.05],   # r_wrist
    [0.13, -0.05, 0.00],   # l_hip
    [0.16, -0.50, 0.03],   # l_knee
    [0.18, -0.95, 0.08],   # l_ankle
    [-0.13, -0.05, 0.00],  # r_hip
    [-0.16, -0.50, 0.03],  # r_knee
    [-0.18, -0.95, 0.08],  # r_ankle
])

_GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))


@dataclass
class BasisShapeModel:
    name: str
    mean: np.ndarray                  # (N, 3), centered, RMS radius 1
    bases: np.ndarray                 # (K, N, 3), each centered, RMS 1
    edges: list[tuple[int, int]]

    @property
    def n_joints(self) -> int:
        return self.mean.shape[0]

    def instantiate(self, coeffs: np.ndarray) -> np.ndarray:
        return self.mean + np.tensordot(np.asarray(coeffs, dtype=np.float64),
                                        self.bases, axes=1)


def _center_unit_rms(points: np.ndarray) -> np.ndarray:
    points = points - points.mean(axis=0, keepdims=True)
    rms = np.sqrt(np.square(points).sum() / points.shape[0])
    if rms <= 0:
        raise DatasetError("degenerate category geometry: all joints coincide")
    return points / rms


def _deformation_bases(name: str, n: int, num_bases: int) -> np.ndarray:
    """Smooth per-joint displacement fields, reproducible from the name."""
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    u = np.linspace(0.0, 1.0, n)
    bases = np.zeros((num_bases, n, 3))
    for k in range(num_bases):
        dir_a = rng.normal(size=3)
        dir_a /= np.linalg.norm(dir_a)
        phase_a = rng.uniform(0.0, 2.0 * np.pi)
        dir_b = rng.normal(size=3)
        dir_b /= np.linalg.norm(dir_b)
        phase_b = rng.uniform(0.0, 2.0 * np.pi)
        wave = (np.outer(np.sin((k + 1) * np.pi * u + phase_a), dir_a)
                + 0.5 * np.outer(np.cos((k + 2) * np.pi * u + phase_b), dir_b))
        bases[k] = _center_unit_rms(wave)
    return bases


def _chain_mean(n: int) -> np.ndarray:
    t = np.linspace(-1.0, 1.0, n)
    points = np.stack([t, 0.35 * np.sin(2.2 * t + 0.4), 0.25 * np.cos(1.7 * t)], axis=1)
    return _center_unit_rms(points)


def _star_mean(n: int) -> np.ndarray:
    points = np.zeros((n, 3))
    for k in range(1, n):
        azimuth = k * _GOLDEN_ANGLE
        elevation = 0.6 if k % 2 == 0 else -0.6
        radius = 0.8 + 0.2 * ((k % 3) / 2.0)
        points[k] = radius * np.array([
            np.cos(azimuth) * np.cos(elevation),
            np.sin(azimuth) * np.cos(elevation),
            np.sin(elevation),
        ])
    return _center_unit_rms(points)


def build_category(name: str, num_bases: int = 3) -> BasisShapeModel:
    """Instantiate a category by name: ``chainN``, ``starN``, or ``humanoid17``."""
    match = re.fullmatch(r"chain(\d+)", name)
    if match:
        n = int(match.group(1))
        if not CHAIN_SIZES[0] <= n <= CHAIN_SIZES[1]:
            raise DatasetError(f"chain size must be in {CHAIN_SIZES}, got {n}")
        mean = _chain_mean(n)
        edges = [(i, i + 1) for i in range(n - 1)]
    else:
        match = re.fullmatch(r"star(\d+)", name)
        if match:
            n = int(match.group(1))
            if not STAR_SIZES[0] <= n <= STAR_SIZES[1]:
                raise DatasetError(f"star size must be in {STAR_SIZES}, got {n}")
            mean = _star_mean(n)
            edges = [(0, k) for k in range(1, n)]
        elif name == "humanoid17":
            mean = _center_unit_rms(_HUMANOID17_POINTS.copy())
            edges = list(HUMANOID17_EDGES)
        else:
            raise DatasetError(f"unknown category {name!r}")
    return BasisShapeModel(name=name, mean=mean,
                           bases=_deformation_bases(name, mean.shape[0], num_bases),
                           edges=edges)


@dataclass
class DatasetSpec:
    """Generation recipe: which categories, how many, and the noise knobs."""

    categories: list[tuple[str, int]]
    noise_std: float = 0.01
    occlusion_rate: float = 0.1
    min_visible: int = 3
    coeff_scale: float = 0.25
    num_bases: int = 3
    seed: int = 0

    def __post_init__(self):
        if not self.categories:
            raise ConfigError("at least one category is required")
        for name, count in self.categories:
            if count < 1:
                raise ConfigError(f"category {name!r} needs a positive count, got {count}")
        if self.noise_std < 0:
            raise ConfigError(f"noise_std must be >= 0, got {self.noise_std}")
        if not 0.0 <= self.occlusion_rate <= 1.0:
            raise ConfigError(f"occlusion_rate must be in [0, 1], got {self.occlusion_rate}")
        if self.min_visible < 0:
            raise ConfigError(f"min_visible must be >= 0, got {self.min_visible}")
        if self.coeff_scale < 0:
            raise ConfigError(f"coeff_scale must be >= 0, got {self.coeff_scale}")
        if self.num_bases < 0:
            raise ConfigError(f"num_bases must be >= 0, got {self.num_bases}")


@dataclass
class Dataset:
    samples: list[Sample]
    n_max: int
    categories: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)


def _quaternion_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def random_rotation_matrix(rng: np.random.Generator) -> np.ndarray:
    """Uniform over rotations: normalized Gaussian quaternion."""
    while True:
        q = rng.normal(size=4)
        norm = np.linalg.norm(q)
        if norm > 1e-12:
            return _quaternion_matrix(q / norm)


def generate_category(model: BasisShapeModel, count: int, spec: DatasetSpec,
                      seed, random_rotation: bool = True) -> list[Sample]:
    """Draw ``count`` samples. Per sample the draw order is fixed (coefficients,
    rotation, noise, then the mask redraw loop) so partial configs reproduce."""
    n = model.n_joints
    if spec.min_visible > n:
        raise DatasetError(
            f"min_visible={spec.min_visible} exceeds the {n} joints of {model.name!r}")
    if spec.occlusion_rate >= 1.0 and spec.min_visible > 0:
        raise DatasetError("full occlusion cannot satisfy a positive min_visible")
    rng = np.random.default_rng(seed)
    adjacency = edges_to_adjacency(model.edges, n)
    samples = []
    for _ in range(count):
        coeffs = rng.normal(0.0, spec.coeff_scale, size=model.bases.shape[0])
        rotation = random_rotation_matrix(rng) if random_rotation else np.eye(3)
        noise = rng.normal(0.0, spec.noise_std, size=(n, 2))
        shape_cam = model.instantiate(coeffs) @ rotation.T
        w2d = shape_cam[:, :2] + noise
        for attempt in range(10000):
            mask = (rng.random(n) >= spec.occlusion_rate).astype(np.float64)
            if mask.sum() >= spec.min_visible:
                break
        else:
            raise DatasetError(
                f"could not draw a mask with {spec.min_visible} visible joints")
        samples.append(Sample(w2d=w2d, s3d=shape_cam, mask=mask,
                              adjacency=adjacency, category=model.name))
    return samples


def make_dataset(spec: DatasetSpec) -> Dataset:
    """Generate every category with an independent child seed."""
    children = np.random.SeedSequence(spec.seed).spawn(len(spec.categories))
    samples: list[Sample] = []
    names = []
    n_max = 0
    for (name, count), child in zip(spec.categories, children):
        model = build_category(name, spec.num_bases)
        samples.extend(generate_category(model, count, spec, child))
        names.append(name)
        n_max = max(n_max, model.n_joints)
    return Dataset(samples=samples, n_max=n_max, categories=names)


def save_dataset(dataset: Dataset, path) -> None:
    """One JSON object per line; line 1 is the header."""
    lines = [json.dumps({"n_max": dataset.n_max, "categories": dataset.categories})]
    for s in dataset.samples:
        record = {
            "category": s.category,
            "w2d": s.w2d.tolist(),
            "s3d": s.s3d.tolist() if s.s3d is not None else None,
            "mask": [int(v) for v in s.mask.tolist()],
            "edges": [list(e) for e in adjacency_to_edges(s.adjacency)],
        }
        lines.append(json.dumps(record))
    Path(path).write_text("\n".join(lines) + "\n")


def _record_to_sample(record: dict, n_max: int, categories: list[str], ln: int) -> Sample:
    if not isinstance(record, dict):
        raise DatasetError("record must be a JSON object", line=ln)
    for key in ("category", "w2d", "mask", "edges"):
        if key not in record:
            raise DatasetError(f"record is missing {key!r}", line=ln)
    category = record["category"]
    if category not in categories:
        raise DatasetError(f"category {category!r} not declared in the header", line=ln)
    w2d = np.asarray(record["w2d"], dtype=np.float64)
    if w2d.ndim != 2 or w2d.shape[1] != 2:
        raise DatasetError(f"w2d must be an Nx2 array, got shape {w2d.shape}", line=ln)
    n = w2d.shape[0]
    if n > n_max:
        raise DatasetError(f"record has {n} joints but the header allows {n_max}", line=ln)
    mask = np.asarray(record["mask"], dtype=np.float64)
    s3d = record.get("s3d")
    if s3d is not None:
        s3d = np.asarray(s3d, dtype=np.float64)
    try:
        adjacency = edges_to_adjacency(record["edges"], n)
        sample = Sample(w2d=w2d, s3d=s3d, mask=mask, adjacency=adjacency, category=category)
        validate_sample(sample, min_visible=1)
    except LiftError as exc:
        raise DatasetError(str(exc), line=ln) from exc
    return sample


def load_dataset(path) -> Dataset:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].strip():
        raise DatasetError("missing header", line=1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetError(f"invalid JSON: {exc}", line=1) from exc
    if not isinstance(header, dict) or "n_max" not in header or "categories" not in header:
        raise DatasetError("header must carry n_max and categories", line=1)
    n_max = header["n_max"]
    categories = header["categories"]
    if not isinstance(n_max, int) or n_max < 1:
        raise DatasetError(f"n_max must be a positive integer, got {n_max!r}", line=1)
    if not isinstance(categories, list) or not all(isinstance(c, str) for c in categories):
        raise DatasetError("categories must be a list of names", line=1)
    samples = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"invalid JSON: {exc}", line=ln) from exc
        samples.append(_record_to_sample(record, n_max, categories, ln))
    return Dataset(samples=samples, n_max=n_max, categories=categories)


def rig_subset(dataset: Dataset, keep: list[int], edges: list[tuple[int, int]]) -> Dataset:
    """Restrict every sample to the ``keep`` joints under a new edge list.

    Samples left with fewer than min(3, len(keep)) visible joints are dropped
    with a count warning (3 is what downstream alignment needs; tiny rigs can
    never reach it, so for them only fully occluded subsets are dropped).
    Categories are renamed with a ``:rigK`` suffix so reports stay separable.
    """
    if not keep:
        raise DatasetError("rig subset needs at least one joint")
    if len(set(keep)) != len(keep):
        raise DatasetError("rig subset indices must be unique")
    k = len(keep)
    suffix = f":rig{k}"
    adjacency = edges_to_adjacency(edges, k)
    keep_idx = torch.as_tensor(keep, dtype=torch.long)
    needed = min(3, k)
    out = []
    dropped = 0
    for s in dataset.samples:
        if int(keep_idx.max()) >= s.n_joints or int(keep_idx.min()) < 0:
            raise DatasetError(
                f"rig index out of range for {s.n_joints}-joint sample of {s.category!r}")
        mask = s.mask[keep_idx]
        if float(mask.sum()) < needed:
            dropped += 1
            continue
        out.append(Sample(w2d=s.w2d[keep_idx],
                          s3d=None if s.s3d is None else s.s3d[keep_idx],
                          mask=mask, adjacency=adjacency,
                          category=s.category + suffix))
    if dropped:
        log.warning("rig subset dropped %d samples with fewer than %d visible joints",
                    dropped, needed)
    return Dataset(samples=out, n_max=k,
                   categories=[c + suffix for c in dataset.categories])


def make_ood_split(dataset: Dataset, holdout: str) -> tuple[Dataset, Dataset]:
    """Split into (everything else, the held-out category). Both sides keep the
    global ``n_max`` so paddings stay compatible."""
    if holdout not in dataset.categories:
        raise DatasetError(f"holdout category {holdout!r} is not in the dataset")
    train = [s for s in dataset.samples if s.category != holdout]
    test = [s for s in dataset.samples if s.category == holdout]
    return (Dataset(samples=train, n_max=dataset.n_max,
                    categories=[c for c in dataset.categories if c != holdout]),
            Dataset(samples=test, n_max=dataset.n_max, categories=[holdout]))


def pad_batch(samples: list[Sample], n_pad: int | None = None):
    """Stack samples into padded tensors: (w2d, mask, adjacency, s3d).

    ``s3d`` is None unless every sample carries ground truth. Padded rows have
    zero mask, zero coordinates, and no edges.
    """
    if not samples:
        raise DatasetError("cannot batch zero samples")
    widest = max(s.n_joints for s in samples)
    n = widest if n_pad is None else n_pad
    if n < widest:
        raise ShapeError(f"n_pad={n} is smaller than the widest sample ({widest})")
    b = len(samples)
    w2d = torch.zeros((b, n, 2), dtype=torch.float64)
    mask = torch.zeros((b, n), dtype=torch.float64)
    adj = torch.zeros((b, n, n), dtype=torch.float64)
    has_gt = all(s.s3d is not None for s in samples)
    s3d = torch.zeros((b, n, 3), dtype=torch.float64) if has_gt else None
    for i, s in enumerate(samples):
        j = s.n_joints
        w2d[i, :j] = s.w2d
        mask[i, :j] = s.mask
        adj[i, :j, :j] = s.adjacency
        if has_gt:
            s3d[i, :j] = s.s3d
    return w2d, mask, adj, s3d


def _parse_categories(value: str) -> list[tuple[str, int]]:
    out = []
    for chunk in value.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        if ":" not in chunk:
            raise ConfigError(f"category entry {chunk!r} must look like name:count")
        name, _, count = chunk.partition(":")
        try:
            out.append((name.strip(), int(count)))
        except ValueError as exc:
            raise ConfigError(f"bad category count in {chunk!r}") from exc
    if not out:
        raise ConfigError("categories must list at least one name:count entry")
    return out


_SPEC_FIELDS = {
    "categories": _parse_categories,
    "noise_std": float,
    "occlusion_rate": float,
    "min_visible": int,
    "coeff_scale": float,
    "num_bases": int,
    "seed": int,
}


def load_dataset_spec(path) -> DatasetSpec:
    """Flat ``key = value`` file; ``categories`` is a comma list of name:count."""
    pairs = parse_kv_lines(Path(path).read_text())
    kwargs = {}
    for key, value in pairs.items():
        if key not in _SPEC_FIELDS:
            raise ConfigError(f"unknown dataset option {key!r}")
        try:
            kwargs[key] = _SPEC_FIELDS[key](value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {value!r}") from exc
    if "categories" not in kwargs:
        raise ConfigError("dataset spec must set categories")
    return DatasetSpec(**kwargs)
