"""Procedural shape world: primitive surfaces, a frozen invertible latent codec, Chamfer distance.

Shapes come from a small discrete grid per family so that every shape is
exactly describable by four condition tokens ``[family, p0, p1, p2]``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .layout import SequenceLayout, block_segments

FAMILIES = ("sphere", "box", "cylinder")

# parameter grid per family; one tuple of levels per parameter slot
PARAM_LEVELS: dict[str, tuple[tuple[float, ...], ...]] = {
    "sphere": ((0.5, 0.7, 0.9),),
    "box": ((0.25, 0.4, 0.55),) * 3,
    "cylinder": ((0.3, 0.5, 0.7), (0.3, 0.5, 0.7)),
}
N_SLOTS = 3
N_LEVELS = 3


class ShapeError(ValueError):
    pass


class Vocab:
    """Token ids for the toy vocabulary."""

    PAD, BOS, CAP, EOS, NONE = 0, 1, 2, 3, 4
    FAMILY0 = 5
    PARAM0 = FAMILY0 + len(FAMILIES)
    SIZE = PARAM0 + N_SLOTS * N_LEVELS

    @classmethod
    def family(cls, name: str) -> int:
        try:
            return cls.FAMILY0 + FAMILIES.index(name)
        except ValueError:
            raise ShapeError(f"unknown family {name!r}; expected one of {FAMILIES}") from None

    @classmethod
    def family_name(cls, token: int) -> str | None:
        k = int(token) - cls.FAMILY0
        return FAMILIES[k] if 0 <= k < len(FAMILIES) else None

    @classmethod
    def param(cls, slot: int, level: int) -> int:
        return cls.PARAM0 + slot * N_LEVELS + level

    @classmethod
    def names(cls) -> list[str]:
        names = ["<pad>", "<bos>", "<cap>", "<eos>", "<none>"] + list(FAMILIES)
        names += [f"p{s}={l}" for s in range(N_SLOTS) for l in range(N_LEVELS)]
        return names


@dataclass(frozen=True)
class ShapeSpec:
    family: str
    params: tuple[float, ...]

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ShapeError(f"unknown family {self.family!r}")
        expected = len(PARAM_LEVELS[self.family])
        if len(self.params) != expected:
            raise ShapeError(f"{self.family} takes {expected} parameters, got {len(self.params)}")
        if any(not p > 0 for p in self.params):
            raise ShapeError(f"parameters must be positive: {self.params}")
        if self.bounding_radius > 1 + 1e-12:
            raise ShapeError(f"{self} does not fit the unit ball")

    @property
    def bounding_radius(self) -> float:
        return math.sqrt(sum(p * p for p in self.params)) if self.family != "sphere" else self.params[0]

    def tokens(self) -> list[int]:
        out = [Vocab.family(self.family)]
        for slot, value in enumerate(self.params):
            levels = PARAM_LEVELS[self.family][slot]
            level = int(np.argmin([abs(value - v) for v in levels]))
            out.append(Vocab.param(slot, level))
        out += [Vocab.NONE] * (N_SLOTS - len(self.params))
        return out

    @classmethod
    def from_tokens(cls, tokens: Sequence[int]) -> "ShapeSpec":
        family = Vocab.family_name(tokens[0])
        if family is None:
            raise ShapeError(f"token {tokens[0]} is not a family token")
        params = []
        for slot, levels in enumerate(PARAM_LEVELS[family]):
            k = int(tokens[1 + slot]) - Vocab.PARAM0
            s, level = divmod(k, N_LEVELS)
            if k < 0 or s != slot:
                raise ShapeError(f"token {tokens[1 + slot]} is not a slot-{slot} parameter")
            params.append(levels[level])
        return cls(family, tuple(params))


def templates(families: Sequence[str] = FAMILIES) -> list[ShapeSpec]:
    """Every shape on the parameter grid."""
    return [ShapeSpec(f, tuple(p)) for f in families for p in itertools.product(*PARAM_LEVELS[f])]


def check_cloud(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
        raise ShapeError(f"point cloud must be (N>=1, 3), got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ShapeError("point cloud has non-finite coordinates")
    return pts


def sample_surface(spec: ShapeSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` points uniformly distributed by area on the surface of ``spec``."""
    if n < 1:
        raise ShapeError("need at least one point")
    if spec.family == "sphere":
        v = rng.standard_normal((n, 3))
        return spec.params[0] * v / np.linalg.norm(v, axis=1, keepdims=True)
    if spec.family == "box":
        half = np.array(spec.params)
        a, b, c = half
        # face pairs normal to x, y, z
        areas = np.array([b * c, a * c, a * b])
        axis = rng.choice(3, size=n, p=areas / areas.sum())
        sign = rng.choice([-1.0, 1.0], size=n)
        pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * half
        pts[np.arange(n), axis] = sign * half[axis]
        return pts
    r, h = spec.params
    lateral, cap = 2 * math.pi * r * 2 * h, math.pi * r * r
    on_side = rng.random(n) < lateral / (lateral + 2 * cap)
    theta = rng.uniform(0, 2 * math.pi, size=n)
    rad = np.where(on_side, r, r * np.sqrt(rng.random(n)))
    z = np.where(on_side, rng.uniform(-h, h, size=n), h * rng.choice([-1.0, 1.0], size=n))
    return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)


def surface_distance(spec: ShapeSpec, points) -> np.ndarray:
    """Unsigned distance from each point to the surface of ``spec``."""
    p = check_cloud(points)
    if spec.family == "sphere":
        return np.abs(np.linalg.norm(p, axis=1) - spec.params[0])
    if spec.family == "box":
        q = np.abs(p) - np.array(spec.params)
        outside = np.linalg.norm(np.maximum(q, 0), axis=1)
        inside = np.minimum(q.max(axis=1), 0)
        return np.abs(outside + inside)
    r, h = spec.params
    d = np.stack([np.hypot(p[:, 0], p[:, 1]) - r, np.abs(p[:, 2]) - h], axis=1)
    outside = np.linalg.norm(np.maximum(d, 0), axis=1)
    inside = np.minimum(d.max(axis=1), 0)
    return np.abs(outside + inside)


@dataclass(frozen=True)
class Codec:
    """Frozen affine lift of 3-D points into ``latent_dim`` and its left inverse.

    The offset lies in the orthogonal complement of the lift, so the zero
    latent decodes to the origin.
    """

    weight: np.ndarray  # (latent_dim, 3)
    offset: np.ndarray  # (latent_dim,)
    left_inverse: np.ndarray  # (3, latent_dim)

    @classmethod
    def create(cls, latent_dim: int = 64, seed: int = 1234, scale: float = 32.0) -> "Codec":
        if latent_dim < 3:
            raise ShapeError("latent_dim must be at least 3")
        rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(rng.standard_normal((latent_dim, latent_dim)))
        weight = scale * q[:, :3]
        offset = q[:, 3:] @ rng.normal(0.0, 0.5, size=latent_dim - 3)
        return cls(weight, offset, np.linalg.pinv(weight))

    @property
    def latent_dim(self) -> int:
        return self.weight.shape[0]

    def encode(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        if pts.shape[-1] != 3:
            raise ShapeError(f"encode expects (..., 3) points, got {pts.shape}")
        return pts @ self.weight.T + self.offset

    def decode(self, latents) -> np.ndarray:
        z = np.asarray(latents, dtype=np.float64)
        if z.shape[-1] != self.latent_dim:
            raise ShapeError(f"decode expects (..., {self.latent_dim}) latents, got {z.shape}")
        return (z - self.offset) @ self.left_inverse.T


def chamfer(a, b) -> float:
    """Symmetric mean of nearest-neighbour squared distances: ``(mean_a + mean_b) / 2``."""
    a, b = check_cloud(a), check_cloud(b)
    diff = a[:, None, :] - b[None, :, :]
    d2 = diff[..., 0] ** 2 + diff[..., 1] ** 2 + diff[..., 2] ** 2
    # correctly rounded means make the result independent of summation order
    mean_a = math.fsum(d2.min(axis=1)) / len(a)
    mean_b = math.fsum(d2.min(axis=0)) / len(b)
    return 0.5 * (mean_a + mean_b)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass
class DatasetConfig:
    families: tuple[str, ...] = FAMILIES
    samples_per_family: int = 64
    points_per_shape: int = 64
    block_size: int | None = None
    seed: int = 0
    codec_seed: int = 1234
    codec_scale: float = 32.0
    latent_dim: int = 64

    def __post_init__(self):
        self.families = tuple(self.families)
        for f in self.families:
            if f not in FAMILIES:
                raise ShapeError(f"unknown family {f!r}")
        if self.samples_per_family < 1 or self.points_per_shape < 1:
            raise ShapeError("samples_per_family and points_per_shape must be positive")
        block = self.points_per_shape if self.block_size is None else self.block_size
        if block < 1 or self.points_per_shape % block:
            raise ShapeError(f"points_per_shape {self.points_per_shape} is not divisible by block_size {block}")


@dataclass
class Sample:
    spec: ShapeSpec
    points: np.ndarray  # (N, 3)
    latents: np.ndarray  # (N, latent_dim)
    layout: SequenceLayout
    tokens: np.ndarray  # serial tokens in sequence order
    meta: dict = field(default_factory=dict)


def generation_layout(n_points: int, block_size: int | None = None) -> SequenceLayout:
    """``<bos>``, four condition tokens, then the latent block(s)."""
    return SequenceLayout.build([("text", "serial", 1), ("condition", "serial", 1 + N_SLOTS)] + block_segments(n_points, block_size))


def caption_layout(n_points: int, block_size: int | None = None) -> SequenceLayout:
    """``<bos>``, the clean latent block(s), then ``<cap>`` and the four description tokens."""
    return SequenceLayout.build(
        [("text", "serial", 1)] + block_segments(n_points, block_size) + [("text", "serial", 2 + N_SLOTS)]
    )


def build_dataset(config: DatasetConfig, codec: Codec | None = None) -> list[Sample]:
    codec = codec or Codec.create(config.latent_dim, seed=config.codec_seed, scale=config.codec_scale)
    rng = np.random.default_rng(config.seed)
    layout = generation_layout(config.points_per_shape, config.block_size)
    out = []
    for family in config.families:
        grid = templates([family])
        for _ in range(config.samples_per_family):
            spec = grid[int(rng.integers(len(grid)))]
            pts = sample_surface(spec, config.points_per_shape, rng)
            tokens = np.array([Vocab.BOS] + spec.tokens(), dtype=np.int64)
            out.append(Sample(spec, pts, codec.encode(pts), layout, tokens))
    return out


# ---------------------------------------------------------------------------
# XYZ files
# ---------------------------------------------------------------------------


def write_xyz(points, path: str | Path) -> None:
    pts = check_cloud(points)
    Path(path).write_text("".join(f"{x:.9g} {y:.9g} {z:.9g}\n" for x, y, z in pts))


def read_xyz(path: str | Path) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 3:
            raise ShapeError(f"{path}:{lineno}: expected 'x y z', got {line!r}")
        try:
            rows.append([float(v) for v in fields])
        except ValueError:
            raise ShapeError(f"{path}:{lineno}: non-numeric coordinate in {line!r}") from None
    if not rows:
        raise ShapeError(f"{path}: no points")
    return check_cloud(rows)
