import json

import numpy as np
import pytest

from hseq import numerics as nx
from hseq.flow import FlowSchedule
from hseq.layout import parse_layout
from hseq.model import Model, ModelConfig
from hseq.numerics import NumericError, Tensor
from hseq.trainer import (
    CHECKPOINT_VERSION,
    AdamW,
    Checkpoint,
    CheckpointError,
    ConfigError,
    DataConfig,
    MetricLog,
    OptimConfig,
    RunConfig,
    Stage,
    TrainSchedule,
    ablation_adaln,
    adamw_step,
    clip_grad_norm,
    compute_losses,
    load_config,
    run_stages,
    sequence_losses,
    stage_dataset,
    train_step,
)
from hseq.worldgen import Vocab


def tiny_model(**kw) -> ModelConfig:
    base = dict(d_model=32, n_layers=1, n_heads=2, n_kv_heads=1, d_ff=48, vocab_size=Vocab.SIZE, latent_dim=8)
    return ModelConfig(**{**base, **kw})


def tiny_run(steps=(6, 6), seed=0, **model_kw) -> RunConfig:
    return RunConfig(
        tiny_model(**model_kw),
        TrainSchedule([Stage(8, 0.9, 1e-3, steps[0]), Stage(16, 0.1, 5e-4, steps[1])], FlowSchedule(), seed),
        DataConfig(samples_per_family=8),
        OptimConfig(batch_size=4),
    )


def without_wall(log: MetricLog) -> list[dict]:
    return [{k: v for k, v in r.items() if k != "wall_ms"} for r in log.records]


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def test_adamw_single_step_closed_form():
    p = {"w": Tensor(np.array([1.0]))}
    opt = AdamW(weight_decay=0.0)
    adamw_step(p, {"w": np.array([1.0])}, opt, lr=0.1)
    # m = 0.1, v = 0.001; bias correction gives m_hat = v_hat = 1
    m_hat, v_hat = 0.1 / (1 - 0.9), 0.001 / (1 - 0.999)
    assert p["w"].data[0] == pytest.approx(1.0 - 0.1 * m_hat / (np.sqrt(v_hat) + 1e-8), rel=1e-15)
    assert opt.step_count == 1


def test_adamw_zero_grad_no_decay_is_identity():
    w = np.random.default_rng(0).normal(size=(3, 4))
    p = {"w": Tensor(w.copy())}
    adamw_step(p, {"w": np.zeros_like(w)}, AdamW(weight_decay=0.0), lr=0.1)
    np.testing.assert_array_equal(p["w"].data, w)


def test_adamw_decay_only_path():
    w = np.random.default_rng(1).normal(size=5)
    p = {"w": Tensor(w.copy())}
    adamw_step(p, {"w": np.zeros(5)}, AdamW(weight_decay=0.01), lr=0.1)
    np.testing.assert_allclose(p["w"].data, w * (1 - 0.1 * 0.01), rtol=1e-15)


def test_adamw_non_finite_names_parameter():
    p = {"layers.0.token.wq": Tensor(np.zeros(2))}
    with pytest.raises(NumericError, match="layers.0.token.wq"):
        adamw_step(p, {"layers.0.token.wq": np.array([np.inf, 0.0])}, AdamW(), lr=0.1)


def test_clip_grad_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_grad_norm(g, 1.0) == 5.0
    assert np.sqrt(g["a"] ** 2 + g["b"] ** 2)[0] == pytest.approx(1.0, rel=1e-5)
    g2 = {"a": np.array([0.3])}
    clip_grad_norm(g2, 1.0)
    assert g2["a"][0] == 0.3


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def test_paper_and_desk_profiles_validate():
    paper = TrainSchedule.paper_default()
    assert [(s.resolution, s.dropout_p, s.lr) for s in paper.stages] == [(512, 0.9, 1e-4), (4096, 0.1, 5e-5)]
    desk = TrainSchedule.desk_default()
    assert [(s.resolution, s.dropout_p, s.lr) for s in desk.stages] == [(64, 0.9, 1e-4), (256, 0.1, 5e-5)]
    cfg = RunConfig(ModelConfig(), paper)
    assert RunConfig.from_dict(json.loads(cfg.to_json())).to_json() == cfg.to_json()


@pytest.mark.parametrize(
    "stages",
    [
        [Stage(8, 1.2, 1e-3, 1)],
        [Stage(16, 0.9, 1e-3, 1), Stage(8, 0.1, 1e-3, 1)],
        [Stage(8, 0.1, 1e-3, 1), Stage(16, 0.9, 1e-3, 1)],
        [Stage(8, 0.9, 1e-4, 1), Stage(16, 0.1, 1e-3, 1)],
        [],
    ],
)
def test_schedule_monotonicity_enforced(stages):
    with pytest.raises(ConfigError):
        TrainSchedule(stages)


def test_config_file_errors(tmp_path):
    good = tiny_run().to_dict()
    path = tmp_path / "c.json"
    path.write_text(json.dumps(good))
    assert load_config(path).to_json() == tiny_run().to_json()
    bad = json.loads(json.dumps(good))
    bad["model"]["d_modle"] = 3
    path.write_text(json.dumps(bad))
    with pytest.raises(ConfigError, match="d_modle"):
        load_config(path)
    bad = json.loads(json.dumps(good))
    bad["schedule"]["stages"][0]["dropout_p"] = 1.2
    path.write_text(json.dumps(bad))
    with pytest.raises(ConfigError, match="dropout_p"):
        load_config(path)
    path.write_text('{\n  "model": {,\n}')
    with pytest.raises(ConfigError, match=r"c\.json:2:13"):
        load_config(path)
    bad = json.loads(json.dumps(good))
    bad["data"]["block_size"] = 3
    path.write_text(json.dumps(bad))
    with pytest.raises(ConfigError, match="divisible"):
        load_config(path)


# ---------------------------------------------------------------------------
# losses and steps
# ---------------------------------------------------------------------------


def test_loss_decomposition_exact_zeros():
    cfg = tiny_model(precision="float64")
    model = Model(cfg, seed=0)
    rng = np.random.default_rng(0)
    text_only = parse_layout("text:5")
    out = sequence_losses(model, text_only, rng.integers(0, 17, size=(2, 5)), text_targets=rng.integers(0, 17, size=(2, 5)))
    assert out["flow_mse"].data == 0.0 and out["text_ce"].data > 0
    mixed = parse_layout("text:2,block:4")
    lat = rng.normal(size=(2, 4, 8))
    out = sequence_losses(
        model, mixed, rng.integers(0, 17, size=(2, 2)), lat, 0.5, text_targets=np.full((2, 2), -1), v_target=np.zeros_like(lat)
    )
    assert out["text_ce"].data == 0.0 and out["flow_mse"].data > 0
    assert out["loss"].data == out["flow_mse"].data


def test_dropout_one_drops_every_sample():
    cfg = tiny_run()
    model = Model(cfg.model, seed=0)
    data = stage_dataset(cfg, 0)
    with nx.Tape():
        out = compute_losses(model, data[:6], np.random.default_rng(1), 1.0, FlowSchedule())
    assert out["dropped"].all()
    with nx.Tape():
        out0 = compute_losses(model, data[:6], np.random.default_rng(1), 0.0, FlowSchedule())
    assert not out0["dropped"].any()
    # without caption targets and with every condition dropped nothing is left to score
    with nx.Tape():
        empty = compute_losses(model, data[:6], np.random.default_rng(1), 1.0, FlowSchedule(), caption_weight=0.0)
    assert empty["text_ce"].data == 0.0


def test_dropped_rows_see_null_embedding():
    cfg = tiny_model(precision="float64")
    model = Model(cfg, seed=2)
    layout = parse_layout("text:1,cond:4,block:3")
    lat = np.random.default_rng(3).normal(size=(1, 3, 8))
    a = model.forward(layout, np.array([[1, 5, 8, 11, 14]]), lat, 0.5, drop_condition=np.array([True]))
    b = model.forward(layout, np.array([[1, 7, 10, 13, 16]]), lat, 0.5, drop_condition=np.array([True]))
    np.testing.assert_array_equal(a["velocity"].data, b["velocity"].data)


def test_train_step_updates_all_trainable_params_and_no_codec_state():
    cfg = tiny_run()
    model = Model(cfg.model, seed=0)
    before = {k: v.data.copy() for k, v in model.params.items()}
    opt = AdamW()
    stats = train_step(model, opt, stage_dataset(cfg, 0)[:4], np.random.default_rng(0), cfg.schedule.stages[0], FlowSchedule(), cfg.optim)
    assert np.isfinite(stats["loss"]) and stats["loss"] == pytest.approx(stats["text_ce"] + stats["flow_mse"], rel=1e-6)
    assert set(opt.m) == set(model.params)
    changed = [k for k in before if not np.array_equal(before[k], model.params[k].data)]
    assert "tok_emb" in changed and "flow_head.w" in changed
    assert not any("codec" in k for k in opt.m)


def test_loss_decreases_over_200_steps():
    cfg = RunConfig(
        tiny_model(d_model=48, n_heads=4, n_kv_heads=2, d_ff=96, n_layers=2, latent_dim=64),
        TrainSchedule([Stage(16, 0.5, 2e-3, 200)], FlowSchedule(), seed=0),
        DataConfig(samples_per_family=32),
        OptimConfig(batch_size=8),
    )
    log = run_stages(cfg).log
    loss = log.column("text_ce") + log.column("flow_mse")
    assert np.all(np.isfinite(loss))
    windows = loss.reshape(4, 50).mean(axis=1)
    assert np.all(np.diff(windows) < 0), windows


def test_caption_samples_limits_caption_rows():
    cfg = tiny_run()
    data = stage_dataset(cfg, 0)
    model = Model(cfg.model, seed=0)
    full = compute_losses(model, data[:4], np.random.default_rng(2), 1.0, FlowSchedule())
    part = compute_losses(model, data[:4], np.random.default_rng(2), 1.0, FlowSchedule(), caption_samples=2)
    first = compute_losses(model, data[:2], np.random.default_rng(2), 1.0, FlowSchedule())
    assert float(part["text_ce"].data) != float(full["text_ce"].data)
    # every row is dropped, so the cross-entropy is the caption term of the first two samples only
    assert float(part["text_ce"].data) == pytest.approx(float(first["text_ce"].data), rel=1e-6)
    with pytest.raises(ConfigError):
        OptimConfig(batch_size=4, caption_samples=5)


def test_warmup_ramps_logged_lr():
    cfg = tiny_run(steps=(3, 3))
    cfg.optim.warmup_steps = 4
    lrs = run_stages(cfg).log.column("lr")
    np.testing.assert_allclose(lrs, [2.5e-4, 5e-4, 7.5e-4, 5e-4, 5e-4, 5e-4])
    with pytest.raises(ConfigError):
        OptimConfig(warmup_steps=-1)


# ---------------------------------------------------------------------------
# determinism and persistence
# ---------------------------------------------------------------------------


def test_identical_seeds_identical_logs_and_checkpoints():
    a = run_stages(tiny_run())
    b = run_stages(tiny_run())
    assert without_wall(a.log) == without_wall(b.log)
    assert a.checkpoint.to_bytes() == b.checkpoint.to_bytes()
    c = run_stages(tiny_run(seed=1))
    assert without_wall(c.log) != without_wall(a.log)


@pytest.mark.parametrize("stop", [3, 6, 9])
def test_kill_and_resume_bit_exact(tmp_path, stop):
    cfg = tiny_run()
    full = run_stages(cfg, tmp_path / "full")
    part = run_stages(cfg, tmp_path / "part", stop_after=stop)
    assert part.interrupted
    resumed = run_stages(cfg, tmp_path / "part", resume=Checkpoint.load(tmp_path / "part" / "latest.ckpt"))
    assert resumed.checkpoint.to_bytes() == full.checkpoint.to_bytes()
    assert without_wall(resumed.log) == without_wall(full.log)
    assert (tmp_path / "part" / "stage1.ckpt").read_bytes() == (tmp_path / "full" / "stage1.ckpt").read_bytes()


def test_periodic_checkpoints_resume(tmp_path):
    cfg = tiny_run()
    cfg.optim.checkpoint_every = 4
    full = run_stages(cfg, tmp_path / "a")
    ck = Checkpoint.load(tmp_path / "a" / "stage0.ckpt")
    assert (ck.stage, ck.step, ck.global_step) == (1, 0, 6)
    resumed = run_stages(cfg, tmp_path / "b", resume=ck)
    assert resumed.checkpoint.to_bytes() == full.checkpoint.to_bytes()


def test_two_stages_emit_two_checkpoints(tmp_path):
    result = run_stages(tiny_run(), tmp_path)
    assert [p.name for p in result.stage_checkpoints] == ["stage0.ckpt", "stage1.ckpt"]
    log = MetricLog.read(tmp_path / "metrics.csv")
    assert log.seed == 0 and [r["resolution"] for r in log.records] == [8] * 6 + [16] * 6


def test_checkpoint_save_load_save_byte_identical(tmp_path):
    ck = run_stages(tiny_run(steps=(2, 0))).checkpoint
    ck.save(tmp_path / "a.ckpt")
    again = Checkpoint.load(tmp_path / "a.ckpt")
    again.save(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    raw = (tmp_path / "a.ckpt").read_bytes()
    assert raw[:4] == b"HSEQ"
    model = again.build_model()
    for k, v in model.params.items():
        np.testing.assert_array_equal(v.data, ck.params[k])


def test_checkpoint_errors(tmp_path):
    ck = run_stages(tiny_run(steps=(1, 0))).checkpoint
    raw = bytearray(ck.to_bytes())
    with pytest.raises(CheckpointError, match="magic"):
        Checkpoint.from_bytes(b"XXXX" + bytes(raw[4:]))
    raw[4:8] = (CHECKPOINT_VERSION + 1).to_bytes(4, "little")
    with pytest.raises(CheckpointError, match="version"):
        Checkpoint.from_bytes(bytes(raw))
    other = tiny_run(seed=5)
    with pytest.raises(CheckpointError, match="format v1"):
        run_stages(other, resume=ck)


def test_metric_log_round_trip_and_monotone(tmp_path):
    log = MetricLog(seed=7)
    rec = dict(step=0, stage=0, resolution=8, text_ce=1 / 3, flow_mse=2.5e-7, lr=1e-3, dropout_p=0.9, wall_ms=1.25)
    log.append(rec)
    log.append({**rec, "step": 1, "text_ce": 0.1})
    with pytest.raises(ValueError):
        log.append({**rec, "step": 1})
    log.write(tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_text().splitlines()[:2] == ["# seed=7", "step,stage,resolution,text_ce,flow_mse,lr,dropout_p,wall_ms"]
    back = MetricLog.read(tmp_path / "m.csv")
    assert back.records == log.records and back.seed == 7
    (tmp_path / "bad.csv").write_text("step,stage\n0,0\n")
    with pytest.raises(ValueError, match="missing"):
        MetricLog.read(tmp_path / "bad.csv")


def test_ablation_adaln(tmp_path):
    off, on = ablation_adaln(tiny_run(steps=(4, 2)), tmp_path)
    assert len(off) == len(on) == 6
    assert [r["step"] for r in off.records] == [r["step"] for r in on.records]
    assert off.records[0]["text_ce"] == on.records[0]["text_ce"]
    assert off.records[0]["flow_mse"] == on.records[0]["flow_mse"]
    assert MetricLog.read(tmp_path / "adaln_on.csv").records == on.records
    assert MetricLog.read(tmp_path / "adaln_off.csv").records == off.records
