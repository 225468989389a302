"""Two-stage training: AdamW, progressive resolution, condition dropout, checkpoints and logs."""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import numerics as nx
from .flow import FlowBatch, FlowSchedule, flow_loss
from .model import Model, ModelConfig, init_params
from .numerics import NumericError, Tensor
from .worldgen import (
    N_SLOTS,
    Codec,
    DatasetConfig,
    Sample,
    Vocab,
    build_dataset,
    caption_layout,
    generation_layout,
)

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"HSEQ"
CHECKPOINT_VERSION = 1
METRIC_FIELDS = ("step", "stage", "resolution", "text_ce", "flow_mse", "lr", "dropout_p", "wall_ms")


class ConfigError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class Stage:
    resolution: int
    dropout_p: float
    lr: float
    steps: int


@dataclass
class TrainSchedule:
    stages: list[Stage]
    flow: FlowSchedule = field(default_factory=FlowSchedule)
    seed: int = 0

    def __post_init__(self):
        self.stages = [s if isinstance(s, Stage) else Stage(**s) for s in self.stages]
        if isinstance(self.flow, dict):
            self.flow = FlowSchedule(**self.flow)
        self.validate()

    def validate(self) -> None:
        if not self.stages:
            raise ConfigError("schedule needs at least one stage")
        for k, s in enumerate(self.stages):
            if s.resolution < 1 or s.steps < 0 or not s.lr > 0:
                raise ConfigError(f"stage {k}: resolution and lr must be positive, steps non-negative")
            if not 0.0 <= s.dropout_p <= 1.0:
                raise ConfigError(f"stage {k}: dropout_p {s.dropout_p} outside [0, 1]")
        for k, (a, b) in enumerate(zip(self.stages, self.stages[1:]), 1):
            if b.resolution < a.resolution:
                raise ConfigError(f"stage {k}: resolution decreases ({a.resolution} -> {b.resolution})")
            if b.dropout_p > a.dropout_p:
                raise ConfigError(f"stage {k}: dropout_p increases ({a.dropout_p} -> {b.dropout_p})")
            if b.lr > a.lr:
                raise ConfigError(f"stage {k}: lr increases ({a.lr} -> {b.lr})")

    @property
    def total_steps(self) -> int:
        return sum(s.steps for s in self.stages)

    @classmethod
    def paper_default(cls, steps: tuple[int, int] = (1000, 1000), seed: int = 0) -> "TrainSchedule":
        return cls([Stage(512, 0.9, 1e-4, steps[0]), Stage(4096, 0.1, 5e-5, steps[1])], FlowSchedule(), seed)

    @classmethod
    def desk_default(cls, steps: tuple[int, int] = (1000, 1000), seed: int = 0) -> "TrainSchedule":
        return cls([Stage(64, 0.9, 1e-4, steps[0]), Stage(256, 0.1, 5e-5, steps[1])], FlowSchedule(), seed)


@dataclass
class OptimConfig:
    batch_size: int = 8
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    max_grad_norm: float | None = 1.0
    checkpoint_every: int = 0  # 0: only at stage boundaries
    caption_weight: float = 1.0
    caption_samples: int | None = None  # batch samples also trained in caption order; None means all
    warmup_steps: int = 0  # linear lr ramp over the first global steps

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if not all(0 <= b < 1 for b in self.betas):
            raise ConfigError("betas must lie in [0, 1)")
        if self.caption_samples is not None and not 0 < self.caption_samples <= self.batch_size:
            raise ConfigError("caption_samples must lie in [1, batch_size]")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")


@dataclass
class DataConfig:
    families: tuple[str, ...] = ("sphere", "box", "cylinder")
    samples_per_family: int = 64
    block_size: int | None = None
    codec_seed: int = 1234
    codec_scale: float = 32.0

    def __post_init__(self):
        self.families = tuple(self.families)


@dataclass
class RunConfig:
    model: ModelConfig
    schedule: TrainSchedule
    data: DataConfig = field(default_factory=DataConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)

    def to_dict(self) -> dict:
        return {
            "model": asdict(self.model),
            "schedule": {
                "stages": [asdict(s) for s in self.schedule.stages],
                "flow": asdict(self.schedule.flow),
                "seed": self.schedule.seed,
            },
            "data": asdict(self.data),
            "optim": asdict(self.optim),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        _reject_unknown(doc, {"model", "schedule", "data", "optim"}, "")
        sched = dict(doc.get("schedule") or {})
        _reject_unknown(sched, {"stages", "flow", "seed"}, "schedule")
        if "stages" not in sched:
            raise ConfigError("schedule.stages is required")
        stages = []
        for k, s in enumerate(sched["stages"]):
            _reject_unknown(s, {f.name for f in fields(Stage)}, f"schedule.stages[{k}]")
            stages.append(Stage(**s))
        flow = sched.get("flow") or {}
        _reject_unknown(flow, {f.name for f in fields(FlowSchedule)}, "schedule.flow")
        parts = {}
        for key, klass in (("model", ModelConfig), ("data", DataConfig), ("optim", OptimConfig)):
            sub = doc.get(key) or {}
            _reject_unknown(sub, {f.name for f in fields(klass)}, key)
            try:
                parts[key] = klass(**sub)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{key}: {exc}") from exc
        try:
            schedule = TrainSchedule(stages, FlowSchedule(**flow), int(sched.get("seed", 0)))
        except ValueError as exc:
            raise ConfigError(f"schedule: {exc}") from exc
        cfg = cls(parts["model"], schedule, parts["data"], parts["optim"])
        cfg.validate()
        return cfg

    def validate(self) -> None:
        block = self.data.block_size
        for k, s in enumerate(self.schedule.stages):
            if block is not None and s.resolution % block:
                raise ConfigError(f"stage {k}: resolution {s.resolution} not divisible by block_size {block}")
        if self.model.vocab_size < Vocab.SIZE:
            raise ConfigError(f"vocab_size must be at least {Vocab.SIZE}")
        if self.model.latent_dim < 3:
            raise ConfigError("latent_dim must be at least 3 to hold a point")
        if not self.data.codec_scale > 0:
            raise ConfigError("codec_scale must be positive")

    def codec(self) -> Codec:
        """The frozen codec this run trains against (no trainable state)."""
        return Codec.create(self.model.latent_dim, seed=self.data.codec_seed, scale=self.data.codec_scale)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _reject_unknown(doc: Any, allowed: set[str], where: str) -> None:
    if not isinstance(doc, dict):
        raise ConfigError(f"{where or 'config'}: expected an object")
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in {where or 'top level'}")


def load_config(path: str | Path) -> RunConfig:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    return RunConfig.from_dict(doc)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamW:
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray], lr: float) -> None:
        adamw_step(params, grads, self, lr)


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], opt: AdamW, lr: float) -> None:
    """Bias-corrected Adam update with decoupled weight decay, in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    opt.step_count += 1
    b1, b2 = opt.betas
    c1 = 1.0 - b1**opt.step_count
    c2 = 1.0 - b2**opt.step_count
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        dt = p.data.dtype
        m = opt.m.get(name)
        v = opt.v.get(name)
        m = np.zeros_like(p.data) if m is None else m
        v = np.zeros_like(p.data) if v is None else v
        m = (b1 * m + (1 - b1) * g).astype(dt)
        v = (b2 * v + (1 - b2) * g * g).astype(dt)
        opt.m[name], opt.v[name] = m, v
        update = (m / c1) / (np.sqrt(v / c2) + opt.eps) + opt.weight_decay * p.data
        p.data = (p.data - lr * update).astype(dt)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float | None) -> float:
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if max_norm is not None and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for k in grads:
            grads[k] = (grads[k] * scale).astype(grads[k].dtype)
    return total


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def sequence_losses(
    model: Model,
    layout,
    tokens=None,
    latents=None,
    t=None,
    text_targets=None,
    v_target=None,
) -> dict[str, Tensor]:
    """Cross-entropy and flow MSE for one arbitrary layout.

    ``text_targets`` has one id per serial position, with -1 for positions
    that carry no target. A term with nothing to score is exactly zero.
    """
    dt = model.config.dtype
    out = model.forward(layout, tokens, latents, t)
    zero = Tensor(np.zeros((), dtype=dt))
    ce = zero
    if out["logits"] is not None and text_targets is not None:
        targets = np.asarray(text_targets, dtype=np.int64).reshape(-1)
        rows = np.flatnonzero(targets >= 0)
        if rows.size:
            flat = nx.reshape(out["logits"], (targets.size, -1))
            ce = nx.cross_entropy(nx.take(flat, rows, axis=0), targets[rows])
    mse = zero
    if out["velocity"] is not None and v_target is not None:
        mse = flow_loss(out["velocity"], v_target)
    return {"text_ce": ce, "flow_mse": mse, "loss": nx.add(ce, mse)}


def _noisy_block_times(n_blocks: int, current: int, t: np.ndarray) -> np.ndarray:
    """Per-block flow times: earlier blocks clean, the current block at ``t``."""
    times = np.zeros((t.shape[0], n_blocks))
    times[:, current] = t
    return times


def compute_losses(
    model: Model,
    samples: list[Sample],
    rng: np.random.Generator,
    dropout_p: float,
    flow_schedule: FlowSchedule,
    block_size: int | None = None,
    caption_weight: float = 1.0,
    caption_samples: int | None = None,
) -> dict[str, Tensor]:
    """Text cross-entropy and flow MSE for one batch (records onto the active tape).

    Every sample contributes a generation-order sequence (condition, then the
    noisy block); the first ``caption_samples`` (default all) also contribute a
    caption-order sequence (clean block, then the tokens).
    In multi-block mode one block index is drawn per step; earlier blocks are
    clean context and later ones are not included.
    """
    dt = model.config.dtype
    B = len(samples)
    n_points = samples[0].latents.shape[0]
    block = n_points if block_size is None else block_size
    n_blocks = n_points // block
    current = int(rng.integers(n_blocks)) if n_blocks > 1 else 0
    upto = (current + 1) * block

    x0 = np.stack([s.latents[:upto] for s in samples]).astype(dt)
    noisy = x0[:, current * block : upto]
    fb = FlowBatch.draw(noisy, rng, flow_schedule)
    x_in = x0.copy()
    x_in[:, current * block : upto] = fb.x_t
    drop = rng.random(B) < dropout_p

    tokens = np.stack([s.tokens for s in samples])
    gen = model.forward(
        generation_layout(upto, block),
        tokens,
        x_in,
        _noisy_block_times(current + 1, current, fb.t),
        drop_condition=drop,
    )
    v_pred = nx.slice_axis(gen["velocity"], current * block, upto, axis=1)
    mse = flow_loss(v_pred, fb.v_target)

    # generation order: <bos> f p0 p1 p2 -> positions 0..3 predict 1..4, kept rows only
    logits_rows, targets = [], []
    keep = np.flatnonzero(~drop)
    n_serial = tokens.shape[1]
    if keep.size:
        flat = nx.reshape(gen["logits"], (B * n_serial, -1))
        rows = (keep[:, None] * n_serial + np.arange(n_serial - 1)[None, :]).reshape(-1)
        logits_rows.append(nx.take(flat, rows, axis=0))
        targets.append(tokens[keep][:, 1:].reshape(-1))

    ce_terms = []
    if logits_rows:
        ce_terms.append((nx.cross_entropy(logits_rows[0], targets[0]), targets[0].size))
    if caption_weight > 0:
        nc = B if caption_samples is None else min(caption_samples, B)
        cap_tokens = np.concatenate([tokens[:nc, :1], np.full((nc, 1), Vocab.CAP), tokens[:nc, 1:]], axis=1)
        all_clean = np.stack([s.latents for s in samples[:nc]]).astype(dt)
        cap = model.forward(caption_layout(n_points, block), cap_tokens, all_clean, 0.0)
        ns = cap_tokens.shape[1]
        flat = nx.reshape(cap["logits"], (nc * ns, -1))
        # <cap> f p0 p1 predict f p0 p1 p2
        rows = (np.arange(nc)[:, None] * ns + np.arange(1, ns - 1)[None, :]).reshape(-1)
        ce_terms.append((nx.mul_scalar(nx.cross_entropy(nx.take(flat, rows, axis=0), cap_tokens[:, 2:].reshape(-1)), caption_weight), rows.size))

    if ce_terms:
        total = sum(n for _, n in ce_terms)
        ce = ce_terms[0][0] if len(ce_terms) == 1 else None
        if ce is None:
            ce = nx.add(
                nx.mul_scalar(ce_terms[0][0], ce_terms[0][1] / total),
                nx.mul_scalar(ce_terms[1][0], ce_terms[1][1] / total),
            )
    else:
        ce = Tensor(np.zeros((), dtype=dt))
    return {"text_ce": ce, "flow_mse": mse, "loss": nx.add(ce, mse), "dropped": drop}


def train_step(
    model: Model,
    opt: AdamW,
    samples: list[Sample],
    rng: np.random.Generator,
    stage: Stage,
    flow_schedule: FlowSchedule,
    optim: OptimConfig,
    block_size: int | None = None,
    lr: float | None = None,
) -> dict[str, float]:
    with nx.Tape() as tape:
        losses = compute_losses(
            model, samples, rng, stage.dropout_p, flow_schedule, block_size, optim.caption_weight, optim.caption_samples
        )
        tape.backward(losses["loss"])
    grads = {}
    for name, p in model.params.items():
        grads[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
        p.grad = None
    norm = clip_grad_norm(grads, optim.max_grad_norm)
    adamw_step(model.params, grads, opt, stage.lr if lr is None else lr)
    return {
        "text_ce": float(losses["text_ce"].data),
        "flow_mse": float(losses["flow_mse"].data),
        "loss": float(losses["loss"].data),
        "grad_norm": norm,
    }


# ---------------------------------------------------------------------------
# metric log
# ---------------------------------------------------------------------------


@dataclass
class MetricLog:
    records: list[dict] = field(default_factory=list)
    seed: int | None = None

    def append(self, record: dict) -> None:
        if self.records and record["step"] <= self.records[-1]["step"]:
            raise ValueError("metric steps must increase")
        self.records.append({k: record[k] for k in METRIC_FIELDS})

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records], dtype=np.float64)

    def truncate(self, step: int) -> None:
        self.records = [r for r in self.records if r["step"] < step]

    def to_csv(self) -> str:
        buf = io.StringIO()
        if self.seed is not None:
            buf.write(f"# seed={self.seed}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for r in self.records:
            w.writerow([_fmt(r[k]) for k in METRIC_FIELDS])
        return buf.getvalue()

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def read(cls, path: str | Path) -> "MetricLog":
        lines = Path(path).read_text().splitlines()
        seed = None
        body = []
        for line in lines:
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition("=")
                if key == "seed":
                    seed = int(val)
            elif line.strip():
                body.append(line)
        reader = csv.DictReader(body)
        missing = set(METRIC_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing column(s) {sorted(missing)}")
        out = cls(seed=seed)
        for row in reader:
            out.records.append(
                {k: (int(row[k]) if k in ("step", "stage", "resolution") else float(row[k])) for k in METRIC_FIELDS}
            )
        return out


def _fmt(x) -> str:
    return str(x) if isinstance(x, (int, np.integer)) else repr(float(x))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    config: RunConfig
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    adam_step: int
    stage: int
    step: int  # steps completed within ``stage``
    global_step: int
    rng_state: dict

    def to_bytes(self) -> bytes:
        manifest, blobs, offset = [], [], 0
        for group, tensors in (("param", self.params), ("adam_m", self.adam_m), ("adam_v", self.adam_v)):
            for name in tensors:
                arr = np.ascontiguousarray(tensors[name], dtype="<f4")
                raw = arr.tobytes()
                manifest.append({"name": f"{group}/{name}", "shape": list(arr.shape), "offset": offset})
                blobs.append(raw)
                offset += len(raw)
        header = {
            "format_version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "cursor": {"stage": self.stage, "step": self.step, "global_step": self.global_step, "adam_step": self.adam_step},
            "rng": self.rng_state,
            "tensors": manifest,
        }
        hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(hdr)) + hdr + b"".join(blobs)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        if raw[:4] != CHECKPOINT_MAGIC:
            raise CheckpointError("not an HSEQ checkpoint (bad magic)")
        version, hlen = struct.unpack("<IQ", raw[4:16])
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"checkpoint format version {version}, this build reads version {CHECKPOINT_VERSION}")
        header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
        payload = memoryview(raw)[16 + hlen :]
        groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
        for entry in header["tensors"]:
            group, name = entry["name"].split("/", 1)
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            arr = np.frombuffer(payload, dtype="<f4", count=count, offset=entry["offset"]).reshape(entry["shape"])
            groups[group][name] = arr.astype(np.float32)
        cur = header["cursor"]
        return cls(
            config=RunConfig.from_dict(header["config"]),
            params=groups["param"],
            adam_m=groups["adam_m"],
            adam_v=groups["adam_v"],
            adam_step=cur["adam_step"],
            stage=cur["stage"],
            step=cur["step"],
            global_step=cur["global_step"],
            rng_state=header["rng"],
        )

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    def build_model(self, precision: str | None = None) -> Model:
        cfg = copy.deepcopy(self.config.model)
        if precision is not None:
            cfg.precision = precision
        params = {k: Tensor(v.astype(cfg.dtype), requires_grad=True, name=k) for k, v in self.params.items()}
        return Model(cfg, params)


def _snapshot(config, model, opt, stage, step, global_step, rng) -> Checkpoint:
    return Checkpoint(
        config=config,
        params={k: t.data.copy() for k, t in model.params.items()},
        adam_m={k: v.copy() for k, v in opt.m.items()},
        adam_v={k: v.copy() for k, v in opt.v.items()},
        adam_step=opt.step_count,
        stage=stage,
        step=step,
        global_step=global_step,
        rng_state=copy.deepcopy(rng.bit_generator.state),
    )


# ---------------------------------------------------------------------------
# staged runs
# ---------------------------------------------------------------------------


def stage_dataset(config: RunConfig, stage_index: int) -> list[Sample]:
    stage = config.schedule.stages[stage_index]
    return build_dataset(
        DatasetConfig(
            families=config.data.families,
            samples_per_family=config.data.samples_per_family,
            points_per_shape=stage.resolution,
            block_size=config.data.block_size,
            seed=config.schedule.seed * 1000 + stage_index,
            codec_seed=config.data.codec_seed,
            codec_scale=config.data.codec_scale,
            latent_dim=config.model.latent_dim,
        )
    )


@dataclass
class RunResult:
    checkpoint: Checkpoint
    log: MetricLog
    stage_checkpoints: list[Path]
    interrupted: bool = False


def run_stages(
    config: RunConfig,
    out_dir: str | Path | None = None,
    resume: Checkpoint | None = None,
    stop_after: int | None = None,
    log_every: int = 0,
    on_step: Callable[[dict], None] | None = None,
) -> RunResult:
    """Execute every stage in order, checkpointing at stage boundaries.

    ``stop_after`` ends the run after that many global steps (simulating an
    interruption); ``resume`` continues bit-exactly from a checkpoint.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    schedule = config.schedule
    metrics = MetricLog(seed=schedule.seed)
    rng = np.random.default_rng(schedule.seed)
    if resume is not None:
        if resume.config.to_json() != config.to_json():
            raise CheckpointError(
                f"checkpoint (format v{CHECKPOINT_VERSION}) was written by a different run configuration"
            )
        model = resume.build_model(config.model.precision)
        opt = AdamW(config.optim.betas, config.optim.eps, config.optim.weight_decay, resume.adam_step,
                    {k: v.astype(config.model.dtype) for k, v in resume.adam_m.items()},
                    {k: v.astype(config.model.dtype) for k, v in resume.adam_v.items()})
        rng.bit_generator.state = copy.deepcopy(resume.rng_state)
        start_stage, start_step, global_step = resume.stage, resume.step, resume.global_step
        if out is not None and (out / "metrics.csv").exists():
            metrics = MetricLog.read(out / "metrics.csv")
            metrics.truncate(global_step)
    else:
        model = Model(config.model, init_params(config.model, schedule.seed))
        opt = AdamW(config.optim.betas, config.optim.eps, config.optim.weight_decay)
        start_stage, start_step, global_step = 0, 0, 0

    stage_paths: list[Path] = []
    for si in range(start_stage, len(schedule.stages)):
        stage = schedule.stages[si]
        data = stage_dataset(config, si)
        first = start_step if si == start_stage else 0
        for step in range(first, stage.steps):
            if stop_after is not None and global_step >= stop_after:
                ckpt = _snapshot(config, model, opt, si, step, global_step, rng)
                if out is not None:
                    ckpt.save(out / "latest.ckpt")
                    metrics.write(out / "metrics.csv")
                return RunResult(ckpt, metrics, stage_paths, interrupted=True)
            t0 = time.perf_counter()
            idx = rng.choice(len(data), size=config.optim.batch_size, replace=False)
            lr = stage.lr * min(1.0, (global_step + 1) / config.optim.warmup_steps) if config.optim.warmup_steps else stage.lr
            stats = train_step(
                model, opt, [data[i] for i in idx], rng, stage, schedule.flow, config.optim, config.data.block_size, lr
            )
            record = {
                "step": global_step,
                "stage": si,
                "resolution": stage.resolution,
                "text_ce": stats["text_ce"],
                "flow_mse": stats["flow_mse"],
                "lr": lr,
                "dropout_p": stage.dropout_p,
                "wall_ms": round((time.perf_counter() - t0) * 1000.0, 3),
            }
            metrics.append(record)
            global_step += 1
            if on_step is not None:
                on_step(record)
            if log_every and global_step % log_every == 0:
                log.info("step %d stage %d ce %.4f mse %.4f", record["step"], si, record["text_ce"], record["flow_mse"])
            every = config.optim.checkpoint_every
            if out is not None and every and global_step % every == 0 and step + 1 < stage.steps:
                _snapshot(config, model, opt, si, step + 1, global_step, rng).save(out / "latest.ckpt")
                metrics.write(out / "metrics.csv")
        ckpt = _snapshot(config, model, opt, si + 1, 0, global_step, rng)
        if out is not None:
            path = out / f"stage{si}.ckpt"
            ckpt.save(path)
            ckpt.save(out / "latest.ckpt")
            metrics.write(out / "metrics.csv")
            stage_paths.append(path)
    final = _snapshot(config, model, opt, len(schedule.stages), 0, global_step, rng)
    return RunResult(final, metrics, stage_paths)


def ablation_adaln(config: RunConfig, out_dir: str | Path | None = None) -> tuple[MetricLog, MetricLog]:
    """Train the AdaLN-off and AdaLN-on arms from identical seeds and data."""
    logs = []
    for enabled in (False, True):
        arm = copy.deepcopy(config)
        arm.model.adaln_enabled = enabled
        arm_dir = Path(out_dir) / f"adaln_{'on' if enabled else 'off'}" if out_dir is not None else None
        result = run_stages(arm, arm_dir)
        logs.append(result.log)
        if out_dir is not None:
            result.log.write(Path(out_dir) / f"adaln_{'on' if enabled else 'off'}.csv")
    off, on = logs
    if [r["step"] for r in off.records] != [r["step"] for r in on.records]:
        raise RuntimeError("ablation arms are not step-aligned")
    return off, on
