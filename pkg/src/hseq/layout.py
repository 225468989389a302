"""Segment structure of a sample and the hybrid causal/parallel attention mask.

Every serial token is its own attention group; every parallel segment is a
single group. Group ``g`` sees all groups ``< g`` fully, serial tokens see
themselves, and a parallel segment sees itself entirely. Positions advance by
one per group, so all tokens of a block share one rotary index.
"""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MODALITIES = ("text", "condition", "latent3d")
MODES = ("serial", "parallel")

# short names accepted by parse_layout
_ALIASES = {
    "text": ("text", "serial"),
    "cond": ("condition", "serial"),
    "condition": ("condition", "serial"),
    "block": ("latent3d", "parallel"),
    "latent": ("latent3d", "parallel"),
}


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class Segment:
    modality: str
    mode: str
    length: int
    block_id: int = 0

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise LayoutError(f"unknown modality {self.modality!r}")
        if self.mode not in MODES:
            raise LayoutError(f"unknown mode {self.mode!r}")
        if int(self.length) < 1:
            raise LayoutError(f"segment length must be >= 1, got {self.length}")

    @property
    def parallel(self) -> bool:
        return self.mode == "parallel"


@dataclass(frozen=True)
class SequenceLayout:
    segments: tuple[Segment, ...]

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        if not self.segments:
            raise LayoutError("layout must contain at least one segment")
        ids = [s.block_id for s in self.segments]
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise LayoutError(f"block_id must be strictly increasing, got {ids}")

    @classmethod
    def build(cls, parts: Iterable[tuple[str, str, int]]) -> "SequenceLayout":
        """Build from ``(modality, mode, length)`` triples, numbering block ids in order."""
        return cls(tuple(Segment(m, mode, int(n), i) for i, (m, mode, n) in enumerate(parts)))

    @cached_property
    def total_len(self) -> int:
        return sum(int(s.length) for s in self.segments)

    @cached_property
    def _segment_walk(self) -> tuple[list[int], list[tuple[int, int, bool]]]:
        # (end offsets, (first token, first group, parallel)) per segment, for pairwise lookups
        ends, info = [], []
        offset = group = 0
        for seg in self.segments:
            info.append((offset, group, seg.parallel))
            offset += seg.length
            group += 1 if seg.parallel else seg.length
            ends.append(offset)
        return ends, info

    def __len__(self) -> int:
        return self.total_len

    @cached_property
    def starts(self) -> tuple[int, ...]:
        out, acc = [], 0
        for s in self.segments:
            out.append(acc)
            acc += s.length
        return tuple(out)

    @cached_property
    def token_modes(self) -> np.ndarray:
        """1 for tokens in parallel segments, 0 for serial ones."""
        return np.concatenate([np.full(s.length, int(s.parallel)) for s in self.segments])

    @cached_property
    def token_modalities(self) -> tuple[str, ...]:
        return tuple(m for s in self.segments for m in [s.modality] * s.length)

    @cached_property
    def token_segments(self) -> np.ndarray:
        return np.concatenate([np.full(s.length, k) for k, s in enumerate(self.segments)])

    def describe(self) -> str:
        short = {("text", "serial"): "text", ("condition", "serial"): "cond", ("latent3d", "parallel"): "block"}
        return ",".join(
            f"{short.get((s.modality, s.mode), s.modality + '/' + s.mode)}:{s.length}" for s in self.segments
        )


@dataclass(frozen=True)
class AttentionMask:
    n: int
    bits: np.ndarray

    def __eq__(self, other):
        return isinstance(other, AttentionMask) and self.n == other.n and np.array_equal(self.bits, other.bits)

    def __hash__(self):
        return hash((self.n, self.bits.tobytes()))


@dataclass(frozen=True)
class PositionMap:
    pos: np.ndarray

    def __eq__(self, other):
        return isinstance(other, PositionMap) and np.array_equal(self.pos, other.pos)

    def __hash__(self):
        return hash(self.pos.tobytes())


def token_groups(layout: SequenceLayout) -> tuple[np.ndarray, np.ndarray]:
    """Per-token group index and a per-token flag for parallel groups."""
    groups = np.empty(layout.total_len, dtype=np.int64)
    parallel = np.empty(layout.total_len, dtype=bool)
    g = 0
    for seg, start in zip(layout.segments, layout.starts):
        sl = slice(start, start + seg.length)
        parallel[sl] = seg.parallel
        if seg.parallel:
            groups[sl] = g
            g += 1
        else:
            groups[sl] = np.arange(g, g + seg.length)
            g += seg.length
    return groups, parallel


def compile_mask(layout: SequenceLayout) -> AttentionMask:
    if not isinstance(layout, SequenceLayout) or not layout.segments:
        raise LayoutError("empty layout")
    groups, parallel = token_groups(layout)
    gi, gj = groups[:, None], groups[None, :]
    n = layout.total_len
    idx = np.arange(n)
    same = gi == gj
    bits = (gj < gi) | (same & (parallel[:, None] | (idx[None, :] <= idx[:, None])))
    return AttentionMask(n, bits)


def assign_positions(layout: SequenceLayout) -> PositionMap:
    pos = np.empty(layout.total_len, dtype=np.int64)
    counter = 0
    for seg, start in zip(layout.segments, layout.starts):
        if seg.parallel:
            pos[start : start + seg.length] = counter
            counter += 1
        else:
            pos[start : start + seg.length] = np.arange(counter, counter + seg.length)
            counter += seg.length
    return PositionMap(pos)


def _locate(layout: SequenceLayout, i: int) -> tuple[int, bool]:
    ends, info = layout._segment_walk
    k = bisect_right(ends, i)
    if k == len(ends):
        raise IndexError(i)
    first, group, parallel = info[k]
    return (group, True) if parallel else (group + (i - first), False)


def brute_force_visibility(layout: SequenceLayout, i: int, j: int) -> bool:
    """Evaluate the pairwise group rule for one (i, j) without building a matrix."""
    n = layout.total_len
    if not (0 <= i < n and 0 <= j < n):
        raise IndexError(f"pair ({i}, {j}) out of range for layout of {n} tokens")
    gi, par_i = _locate(layout, i)
    gj, _ = _locate(layout, j)
    if gj < gi:
        return True
    if gj > gi:
        return False
    return par_i or j <= i


def block_segments(n_points: int, block_size: int | None = None) -> list[tuple[str, str, int]]:
    """Split ``n_points`` latent tokens into equal contiguous parallel blocks."""
    block_size = n_points if block_size is None else block_size
    if block_size < 1 or n_points % block_size:
        raise LayoutError(f"{n_points} points are not divisible into blocks of {block_size}")
    return [("latent3d", "parallel", block_size)] * (n_points // block_size)


def parse_layout(text: str) -> SequenceLayout:
    """Parse ``"text:4,block:8,cond:2"`` style descriptions."""
    parts = []
    offset = 0
    for item in text.split(","):
        name, sep, count = item.strip().partition(":")
        where = offset + (len(item) - len(item.lstrip()))
        if not sep:
            raise LayoutError(f"expected 'kind:length' at position {where}, got {item.strip()!r}")
        if name not in _ALIASES:
            raise LayoutError(f"unknown segment kind {name!r} at position {where}")
        try:
            length = int(count)
        except ValueError:
            raise LayoutError(f"bad length {count!r} at position {where + len(name) + 1}") from None
        if length < 1:
            raise LayoutError(f"segment length must be >= 1 at position {where + len(name) + 1}")
        modality, mode = _ALIASES[name]
        parts.append((modality, mode, length))
        offset += len(item) + 1
    return SequenceLayout.build(parts)


# ---------------------------------------------------------------------------
# mask export
# ---------------------------------------------------------------------------


def write_mask_csv(mask: AttentionMask, path: str | Path) -> None:
    rows = (",".join("1" if b else "0" for b in row) for row in mask.bits)
    Path(path).write_text("\n".join(rows) + "\n")


def read_mask_csv(path: str | Path) -> AttentionMask:
    rows = [line for line in Path(path).read_text().splitlines() if line.strip()]
    bits = np.array([[c.strip() == "1" for c in line.split(",")] for line in rows], dtype=bool)
    if bits.ndim != 2 or bits.shape[0] != bits.shape[1]:
        raise LayoutError(f"mask CSV is not square: {bits.shape}")
    return AttentionMask(bits.shape[0], bits)


def write_mask_pgm(mask: AttentionMask, path: str | Path, cell: int = 4) -> None:
    """Binary graymap; visible cells dark, hidden cells white, ``cell`` pixels per entry."""
    img = np.where(mask.bits, 40, 255).astype(np.uint8)
    img = np.kron(img, np.ones((cell, cell), dtype=np.uint8))
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise LayoutError("not a binary PGM file")
    w, h = int(fields[1]), int(fields[2])
    return np.frombuffer(raw[pos + 1 : pos + 1 + w * h], dtype=np.uint8).reshape(h, w)


def segments_of(layout: SequenceLayout, mode: str) -> Sequence[Segment]:
    return [s for s in layout.segments if s.mode == mode]
