"""Command-line entry point: ``hseq {train,sample,caption,maskdump,bench,plot}``."""

from __future__ import annotations

import argparse
import contextlib
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .flow import FlowSchedule
from .layout import LayoutError, compile_mask, parse_layout, write_mask_csv, write_mask_pgm
from .model import Model, ModelConfig
from .numerics import NumericError
from .pipeline import benchmark_blocks, caption_cloud, generate_shape
from .presets import PRESETS
from .trainer import Checkpoint, CheckpointError, ConfigError, MetricLog, RunConfig, load_config, run_stages
from .worldgen import FAMILIES, Codec, ShapeError, ShapeSpec, Vocab, chamfer, read_xyz, sample_surface, surface_distance, write_xyz

log = logging.getLogger("hseq")

REFERENCE_POINTS = 1024


class UsageError(Exception):
    pass


def _thread_limit(deterministic: bool):
    """Cap BLAS threads: one under ``--deterministic``, else ``HSEQ_THREADS`` if set."""
    limit = 1 if deterministic else None
    env = os.environ.get("HSEQ_THREADS")
    if limit is None and env:
        try:
            limit = max(1, int(env))
        except ValueError:
            raise UsageError(f"HSEQ_THREADS must be an integer, got {env!r}") from None
    if limit is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=limit)


def _resolve_config(arg: str | None, seed: int | None) -> RunConfig:
    if arg is None or (arg in PRESETS and not Path(arg).exists()):
        cfg = PRESETS[arg or "desk"]()
    else:
        cfg = load_config(arg)
    if seed is not None:
        cfg.schedule.seed = seed
    cfg.schedule.validate()
    cfg.validate()
    return cfg


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_model(checkpoint: str | None, seed: int) -> tuple[Model, Codec, RunConfig | None]:
    if checkpoint is None:
        log.warning("no --checkpoint given; using randomly initialized parameters")
        model = Model(ModelConfig(), seed=seed)
        return model, Codec.create(model.config.latent_dim), None
    ck = Checkpoint.load(checkpoint)
    return ck.build_model(), ck.config.codec(), ck.config


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _resolve_config(args.config, args.seed)
    out = _out_dir(args.out)
    existing = sorted(p.name for p in out.glob("*.ckpt"))
    resume = None
    if args.resume:
        resume = Checkpoint.load(out / "latest.ckpt")
    elif existing and not args.force:
        raise UsageError(f"{out} already holds checkpoints ({', '.join(existing)}); pass --force to overwrite")
    (out / "config.json").write_text(cfg.to_json() + "\n")
    result = run_stages(cfg, out, resume=resume, log_every=args.log_every)
    print(f"trained {result.checkpoint.global_step} steps; checkpoints: {', '.join(p.name for p in result.stage_checkpoints)}")
    return 0


def _parse_params(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise UsageError(f"--params must be comma-separated numbers, got {text!r}") from None


def cmd_sample(args) -> int:
    if args.family not in FAMILIES:
        raise UsageError(f"unknown family {args.family!r}; choose from {', '.join(FAMILIES)}")
    try:
        spec = ShapeSpec(args.family, _parse_params(args.params))
    except ShapeError as exc:
        raise UsageError(str(exc)) from None
    model, codec, run_cfg = _load_model(args.checkpoint, args.seed)
    n_points = args.points or (run_cfg.schedule.stages[-1].resolution if run_cfg else 64)
    block = args.block_size or (run_cfg.data.block_size if run_cfg else None)
    schedule = FlowSchedule(num_steps=args.steps, cfg_scale=args.cfg_scale)
    out = _out_dir(args.out)
    rng = np.random.default_rng(args.seed)
    reference = sample_surface(spec, REFERENCE_POINTS, np.random.default_rng(7))
    rows = []
    for k in range(args.count):
        pts = generate_shape(model, codec, spec, n_points, schedule, rng, block)
        name = f"sample_{k:03d}.xyz"
        write_xyz(pts, out / name)
        rows.append((k, name, chamfer(pts, reference), float(np.mean(surface_distance(spec, pts)))))
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample", "file", "chamfer", "mean_surface_distance"])
        for k, name, ch, sd in rows:
            w.writerow([k, name, repr(ch), repr(sd)])
    mean = float(np.mean([r[2] for r in rows]))
    print(f"{args.count} sample(s) of {spec.family}{spec.params}: mean chamfer {mean:.5f} (cfg {args.cfg_scale}, {args.steps} steps)")
    return 0


def cmd_caption(args) -> int:
    pts = read_xyz(args.xyz)
    model, codec, run_cfg = _load_model(args.checkpoint, args.seed)
    block = args.block_size or (run_cfg.data.block_size if run_cfg else None)
    tokens = caption_cloud(model, codec, pts, block)
    names = Vocab.names()
    words = [names[t] if t < len(names) else f"<{t}>" for t in tokens]
    family = Vocab.family_name(tokens[0])
    print(" ".join(str(t) for t in tokens))
    print(" ".join(words))
    try:
        print(f"shape: {ShapeSpec.from_tokens(tokens)}")
    except ShapeError:
        print(f"family: {family or 'unrecognized'}")
    return 0


def cmd_maskdump(args) -> int:
    layout = parse_layout(args.layout)
    mask = compile_mask(layout)
    out = _out_dir(args.out)
    write_mask_csv(mask, out / "mask.csv")
    write_mask_pgm(mask, out / "mask.pgm", cell=args.cell)
    print(f"{layout.describe()}: {mask.n} tokens, {int(mask.bits.sum())} visible pairs -> {out / 'mask.csv'}, {out / 'mask.pgm'}")
    return 0


def cmd_bench(args) -> int:
    try:
        sizes = [int(v) for v in args.block_sizes.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--block-sizes must be comma-separated integers, got {args.block_sizes!r}") from None
    for b in sizes:
        if b < 1 or args.total_tokens % b:
            raise UsageError(f"total tokens {args.total_tokens} not divisible by block size {b}")
    model, _, _ = _load_model(args.checkpoint, args.seed)
    schedule = FlowSchedule(num_steps=args.steps, cfg_scale=args.cfg_scale)
    rows = benchmark_blocks(model, args.total_tokens, sizes, schedule, seed=args.seed)
    out = _out_dir(args.out)
    with open(out / "bench.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["block_size", "blocks", "velocity_passes", "expected_passes", "seconds", "speedup"])
        for r in rows:
            w.writerow([r.block_size, r.blocks, r.velocity_passes, r.expected_passes, f"{r.seconds:.4f}", f"{r.speedup:.3f}"])
    for r in rows:
        print(f"B={r.block_size:<5d} blocks={r.blocks:<5d} passes={r.velocity_passes} (expected {r.expected_passes}) {r.seconds:8.3f}s speedup {r.speedup:.2f}x")
    return 0


def plot_logs(paths: list[str | Path], out: str | Path, column: str = "flow_mse") -> Path:
    """Overlay one metric column from aligned logs into a PNG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    logs = [MetricLog.read(p) for p in paths]
    steps = [[r["step"] for r in lg.records] for lg in logs]
    for p, s in zip(paths[1:], steps[1:]):
        if s != steps[0]:
            raise ValueError(f"{p} is not step-aligned with {paths[0]}")
    fig, ax = plt.subplots(figsize=(6, 4), dpi=100)
    for p, lg in zip(paths, logs):
        ax.plot(lg.column("step"), lg.column(column), label=Path(p).stem, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel(column)
    ax.legend()
    fig.tight_layout()
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, format="png")
    plt.close(fig)
    return out


def cmd_plot(args) -> int:
    out = Path(args.out)
    if out.suffix.lower() != ".png":
        out = out / f"{args.column}.png"
    path = plot_logs(args.logs, out, args.column)
    print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the seed")
    common.add_argument("--deterministic", action="store_true", help="pin numerical libraries to one thread")
    common.add_argument("--out", default=None, help="output directory")

    parser = argparse.ArgumentParser(prog="hseq", description="Hybrid serial/parallel sequence modelling on a toy shape world.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="run the staged training recipe")
    p.add_argument("--config", default=None, help="JSON config file or preset name (desk, paper); default desk")
    p.add_argument("--force", action="store_true", help="overwrite existing checkpoints")
    p.add_argument("--resume", action="store_true", help="continue from <out>/latest.ckpt")
    p.add_argument("--log-every", type=int, default=100)
    p.set_defaults(func=cmd_train, default_out="runs/train")

    gen = argparse.ArgumentParser(add_help=False)
    gen.add_argument("--checkpoint", default=None)
    gen.add_argument("--block-size", type=int, default=None)

    p = sub.add_parser("sample", parents=[common, gen], help="generate point clouds for a condition")
    p.add_argument("--family", required=True)
    p.add_argument("--params", required=True, help="comma-separated shape parameters, e.g. 0.5 or 0.25,0.4,0.55")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--points", type=int, default=None)
    p.add_argument("--cfg-scale", type=float, default=7.5)
    p.add_argument("--steps", type=int, default=50)
    p.set_defaults(func=cmd_sample, default_out="runs/sample")

    p = sub.add_parser("caption", parents=[common, gen], help="describe a point cloud with condition tokens")
    p.add_argument("xyz")
    p.set_defaults(func=cmd_caption, default_out=".")

    p = sub.add_parser("maskdump", parents=[common], help="write a compiled attention mask as CSV and PGM")
    p.add_argument("--layout", required=True, help='e.g. "text:4,block:8,text:2,block:8"')
    p.add_argument("--cell", type=int, default=8, help="pixels per mask entry")
    p.set_defaults(func=cmd_maskdump, default_out="runs/mask")

    p = sub.add_parser("bench", parents=[common], help="block-size throughput benchmark")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--total-tokens", type=int, default=512)
    p.add_argument("--block-sizes", default="1,8,64")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--cfg-scale", type=float, default=7.5)
    p.set_defaults(func=cmd_bench, default_out="runs/bench")

    p = sub.add_parser("plot", parents=[common], help="overlay loss curves from metric CSVs")
    p.add_argument("logs", nargs="+")
    p.add_argument("--column", default="flow_mse")
    p.set_defaults(func=cmd_plot, default_out="runs/plot")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.out is None:
        args.out = args.default_out
    if args.command != "train" and args.seed is None:
        args.seed = 0
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        with _thread_limit(args.deterministic):
            return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (ConfigError, CheckpointError, LayoutError, ShapeError, NumericError, ValueError, FileNotFoundError) as exc:
        print(f"hseq: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
