"""End-to-end inference: conditioned shape generation, captioning, and their evaluation."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .flow import FlowSchedule, generate_block
from .layout import LayoutError
from .model import ForwardState, Model
from .worldgen import (
    FAMILIES,
    N_SLOTS,
    Codec,
    ShapeSpec,
    Vocab,
    chamfer,
    sample_surface,
    templates,
)

REFERENCE_POINTS = 1024


def condition_context(model: Model, spec: ShapeSpec | None, guided: bool) -> ForwardState:
    """Cache ``<bos>`` plus the condition tokens.

    With ``guided`` the state has two rows: row 0 sees the condition, row 1
    the null embedding in its place. ``spec=None`` gives an unconditional context.
    """
    cond = spec.tokens() if spec is not None else [Vocab.NONE] * (1 + N_SLOTS)
    tokens = np.array([Vocab.BOS] + cond, dtype=np.int64)
    flags = [False] + [True] * (1 + N_SLOTS)
    if guided:
        state = model.new_state(2)
        model.prefill_serial(state, tokens, condition=flags, drop=np.array([spec is None, True]))
    else:
        state = model.new_state(1)
        model.prefill_serial(state, tokens, condition=flags, drop=np.array([spec is None]))
    return state


def generate_latents(
    model: Model,
    spec: ShapeSpec | None,
    n_points: int,
    schedule: FlowSchedule,
    rng: np.random.Generator,
    block_size: int | None = None,
    state: ForwardState | None = None,
) -> tuple[np.ndarray, ForwardState]:
    block = n_points if block_size is None else block_size
    if block < 1 or n_points % block:
        raise LayoutError(f"{n_points} points are not divisible into blocks of {block}")
    guided = schedule.cfg_scale != 1.0 and spec is not None
    if state is None:
        state = condition_context(model, spec, guided)
    blocks = [generate_block(model, state, block, schedule, rng) for _ in range(n_points // block)]
    return np.concatenate(blocks, axis=0), state


def generate_shape(
    model: Model,
    codec: Codec,
    spec: ShapeSpec | None,
    n_points: int,
    schedule: FlowSchedule,
    rng: np.random.Generator,
    block_size: int | None = None,
) -> np.ndarray:
    latents, _ = generate_latents(model, spec, n_points, schedule, rng, block_size)
    return codec.decode(latents)


def caption_cloud(model: Model, codec: Codec, points: np.ndarray, block_size: int | None = None) -> list[int]:
    """Greedy-decode the four description tokens after the encoded cloud."""
    n = len(points)
    block = n if block_size is None else block_size
    if block < 1 or n % block:
        raise LayoutError(f"{n} points are not divisible into blocks of {block}")
    latents = codec.encode(points)
    state = model.new_state(1)
    model.prefill_serial(state, [Vocab.BOS])
    for k in range(n // block):
        model.finalize_block(state, latents[k * block : (k + 1) * block])
    out = []
    token = Vocab.CAP
    for _ in range(1 + N_SLOTS):
        logits = model.decode_step_serial(state, token)
        token = int(np.argmax(logits[0]))
        out.append(token)
    return out


class TemplateBank:
    """Dense reference clouds for every grid shape, for Chamfer scoring and nearest-template lookup."""

    def __init__(self, families=FAMILIES, n_points: int = REFERENCE_POINTS, seed: int = 7):
        rng = np.random.default_rng(seed)
        self.specs = templates(families)
        self.clouds = [sample_surface(s, n_points, rng) for s in self.specs]
        self._index = {s: k for k, s in enumerate(self.specs)}

    def reference(self, spec: ShapeSpec) -> np.ndarray:
        return self.clouds[self._index[spec]]

    def nearest(self, points: np.ndarray) -> tuple[ShapeSpec, float]:
        scores = [chamfer(points, c) for c in self.clouds]
        k = int(np.argmin(scores))
        return self.specs[k], float(scores[k])


@dataclass
class GenerationReport:
    specs: list[ShapeSpec]
    clouds: list[np.ndarray]
    chamfers: np.ndarray
    predicted: list[ShapeSpec]

    @property
    def mean_chamfer(self) -> float:
        return float(np.mean(self.chamfers))

    @property
    def family_accuracy(self) -> float:
        return float(np.mean([p.family == s.family for p, s in zip(self.predicted, self.specs)]))


def evaluate_generation(
    model: Model,
    codec: Codec,
    specs: list[ShapeSpec],
    n_points: int,
    schedule: FlowSchedule,
    seed: int,
    bank: TemplateBank | None = None,
    block_size: int | None = None,
) -> GenerationReport:
    bank = bank or TemplateBank()
    rng = np.random.default_rng(seed)
    clouds, scores, predicted = [], [], []
    for spec in specs:
        pts = generate_shape(model, codec, spec, n_points, schedule, rng, block_size)
        clouds.append(pts)
        scores.append(chamfer(pts, bank.reference(spec)))
        predicted.append(bank.nearest(pts)[0])
    return GenerationReport(specs, clouds, np.array(scores), predicted)


def evaluate_captions(
    model: Model,
    codec: Codec,
    specs: list[ShapeSpec],
    n_points: int,
    seed: int,
    block_size: int | None = None,
) -> float:
    """Family-token accuracy of greedy captions on freshly sampled clouds."""
    rng = np.random.default_rng(seed)
    hits = []
    for spec in specs:
        pts = sample_surface(spec, n_points, rng)
        tokens = caption_cloud(model, codec, pts, block_size)
        hits.append(tokens[0] == Vocab.family(spec.family))
    return float(np.mean(hits))


def balanced_specs(count: int, seed: int, families=FAMILIES) -> list[ShapeSpec]:
    """``count`` grid shapes cycling through families, parameters drawn at random."""
    rng = np.random.default_rng(seed)
    grids = {f: templates([f]) for f in families}
    out = []
    for k in range(count):
        grid = grids[families[k % len(families)]]
        out.append(grid[int(rng.integers(len(grid)))])
    return out


@dataclass
class BenchRow:
    block_size: int
    blocks: int
    velocity_passes: int
    expected_passes: int
    seconds: float
    speedup: float = 1.0


def benchmark_blocks(
    model: Model,
    total_tokens: int,
    block_sizes,
    schedule: FlowSchedule,
    seed: int = 0,
    spec: ShapeSpec | None = None,
) -> list[BenchRow]:
    """Time generation of ``total_tokens`` latents as ``total_tokens / B`` sequential blocks.

    The velocity-pass count is checked against ``steps * blocks * cfg_passes``.
    """
    spec = spec or templates(["sphere"])[0]
    guided = schedule.cfg_scale != 1.0
    cfg_passes = 2 if guided else 1
    rows = []
    for b in block_sizes:
        if b < 1 or total_tokens % b:
            raise LayoutError(f"total_tokens {total_tokens} is not divisible by block size {b}")
        rng = np.random.default_rng(seed)
        state = condition_context(model, spec, guided)
        t0 = time.perf_counter()
        generate_latents(model, spec, total_tokens, schedule, rng, b, state=state)
        seconds = time.perf_counter() - t0
        expected = schedule.num_steps * (total_tokens // b) * cfg_passes
        if state.velocity_passes != expected:
            raise AssertionError(f"B={b}: {state.velocity_passes} velocity passes, expected {expected}")
        rows.append(BenchRow(b, total_tokens // b, state.velocity_passes, expected, seconds))
    base = next((r.seconds for r in rows if r.block_size == 1), rows[0].seconds)
    for r in rows:
        r.speedup = base / r.seconds
    return rows
