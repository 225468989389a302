"""Dual-expert transformer: a serial (TokenAR) and a parallel (BlockAR) expert sharing one attention.

Each token is routed by its segment mode. Projections, norms and feed-forward
weights are per expert; the softmax runs jointly over the whole sequence under
the hybrid mask. Internally tokens are kept in *expert-sorted* order (all
serial tokens, then all parallel tokens, each in sequence order); attention is
equivariant under that permutation once the mask and positions follow it.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .layout import LayoutError, SequenceLayout, assign_positions, compile_mask
from .numerics import ContractError, Tensor

SERIAL, PARALLEL = 0, 1
EXPERT_NAMES = ("token", "block")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    n_kv_heads: int = 2
    d_ff: int = 344
    vocab_size: int = 64
    latent_dim: int = 64
    rope_base: float = 10000.0
    adaln_enabled: bool = False
    precision: str = "float32"
    norm_eps: float = 1e-6

    def __post_init__(self):
        self.validate()

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def dtype(self) -> np.dtype:
        return nx.resolve_dtype(self.precision)

    def validate(self) -> None:
        for name in ("d_model", "n_layers", "n_heads", "n_kv_heads", "d_ff", "vocab_size", "latent_dim"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.n_kv_heads > self.n_heads or self.n_heads % self.n_kv_heads:
            raise ConfigError(f"n_kv_heads {self.n_kv_heads} must divide n_heads {self.n_heads}")
        if self.head_dim % 2:
            raise ConfigError(f"head_dim {self.head_dim} must be even for rotary encoding")
        if self.precision not in nx.PRECISIONS:
            raise ConfigError(f"unknown precision {self.precision!r}")
        if self.norm_eps < 0:
            raise ConfigError("norm_eps must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def rmsnorm(x: Tensor, gain: Tensor | None, eps: float = 1e-6) -> Tensor:
    ms = nx.mean(nx.mul(x, x), axis=-1, keepdims=True)
    if eps > 0:
        ms = nx.add_scalar(ms, eps)
    y = nx.mul(x, nx.pow_scalar(ms, -0.5))
    return y if gain is None else nx.mul(y, gain)


def swiglu_ffn(x: Tensor, gate_w: Tensor, up_w: Tensor, down_w: Tensor) -> Tensor:
    return nx.matmul(nx.mul(nx.silu(nx.matmul(x, gate_w)), nx.matmul(x, up_w)), down_w)


def rope_tables(pos: np.ndarray, head_dim: int, base: float, dtype=np.float64) -> tuple[np.ndarray, np.ndarray]:
    if head_dim % 2:
        raise ConfigError(f"rotary encoding needs an even head_dim, got {head_dim}")
    half = head_dim // 2
    inv_freq = base ** (-np.arange(half, dtype=np.float64) * 2.0 / head_dim)
    angles = np.asarray(pos, dtype=np.float64)[:, None] * inv_freq[None, :]
    angles = np.concatenate([angles, angles], axis=-1)
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def apply_rope(x: Tensor, pos: np.ndarray, base: float = 10000.0) -> Tensor:
    """Rotate coordinate pairs ``(k, k + head_dim/2)`` of ``x`` with shape (B, T, H, head_dim)."""
    hd = x.shape[-1]
    cos, sin = rope_tables(pos, hd, base, x.dtype)
    cos, sin = cos[:, None, :], sin[:, None, :]
    half = hd // 2
    rotated = nx.concat([nx.neg(nx.slice_axis(x, half, hd, axis=-1)), nx.slice_axis(x, 0, half, axis=-1)], axis=-1)
    return nx.add(nx.mul(x, cos), nx.mul(rotated, sin))


def qk_norm(q: Tensor, k: Tensor, q_gain: Tensor, k_gain: Tensor, eps: float = 1e-6) -> tuple[Tensor, Tensor]:
    return rmsnorm(q, q_gain, eps), rmsnorm(k, k_gain, eps)


def adaln_modulate(h: Tensor, temb: Tensor, weight: Tensor, bias: Tensor, enabled: bool = True) -> Tensor:
    """``(1 + scale) * h + shift`` with scale/shift from an affine map of the timestep embedding."""
    if not enabled:
        raise ContractError("adaln_modulate called with adaln disabled")
    d = h.shape[-1]
    mod = nx.add(nx.matmul(temb, weight), bias)
    scale = nx.slice_axis(mod, 0, d, axis=-1)
    shift = nx.slice_axis(mod, d, 2 * d, axis=-1)
    return nx.add(nx.add(h, nx.mul(scale, h)), shift)


def timestep_embedding(t: np.ndarray, dim: int, dtype=np.float64) -> np.ndarray:
    """Sinusoidal features of flow time ``t`` in [0, 1]; output shape ``t.shape + (dim,)``."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = 1000.0 * np.asarray(t, dtype=np.float64)[..., None] * freqs
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=-1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros(emb.shape[:-1] + (1,))], axis=-1)
    return emb.astype(dtype)


def _linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = nx.matmul(x, w)
    return y if b is None else nx.add(y, b)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def _p(layer: int, expert: int, name: str) -> str:
    return f"layers.{layer}.{EXPERT_NAMES[expert]}.{name}"


def init_params(config: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Random initialization; both experts start from identical weights."""
    rng = np.random.default_rng(seed)
    dt = config.dtype
    d, hd = config.d_model, config.head_dim
    H, KV, F = config.n_heads, config.n_kv_heads, config.d_ff
    out_scale = 1.0 / math.sqrt(2 * config.n_layers)

    def normal(shape, std):
        return Tensor(rng.normal(0.0, std, size=shape).astype(dt), requires_grad=True)

    def ones(shape):
        return Tensor(np.ones(shape, dtype=dt), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape, dtype=dt), requires_grad=True)

    params: dict[str, Tensor] = {
        "tok_emb": normal((config.vocab_size, d), 1.0),
        "null_emb": normal((d,), 1.0),
        "connector.w": normal((config.latent_dim, d), config.latent_dim**-0.5),
        "connector.b": zeros((d,)),
        "time.w": normal((d, d), d**-0.5),
        "time.b": zeros((d,)),
    }
    for layer in range(config.n_layers):
        shared = {
            "attn_norm": ones((d,)),
            "wq": normal((d, H * hd), d**-0.5),
            "wk": normal((d, KV * hd), d**-0.5),
            "wv": normal((d, KV * hd), d**-0.5),
            "wo": normal((H * hd, d), (H * hd) ** -0.5 * out_scale),
            "q_norm": ones((H, hd)),
            "k_norm": ones((KV, hd)),
            "ffn_norm": ones((d,)),
            "w_gate": normal((d, F), d**-0.5),
            "w_up": normal((d, F), d**-0.5),
            "w_down": normal((F, d), F**-0.5 * out_scale),
        }
        for expert in (SERIAL, PARALLEL):
            for name, t in shared.items():
                params[_p(layer, expert, name)] = Tensor(t.data.copy(), requires_grad=True)
        if config.adaln_enabled:
            for site in ("attn", "ffn"):
                params[f"layers.{layer}.adaln.{site}.w"] = zeros((d, 2 * d))
                params[f"layers.{layer}.adaln.{site}.b"] = zeros((2 * d,))
    final = ones((d,))
    for expert in (SERIAL, PARALLEL):
        params[f"final_norm.{EXPERT_NAMES[expert]}"] = Tensor(final.data.copy(), requires_grad=True)
    params["text_head.w"] = normal((d, config.vocab_size), d**-0.5)
    params["text_head.b"] = zeros((config.vocab_size,))
    params["flow_head.w"] = normal((d, config.latent_dim), d**-0.5)
    params["flow_head.b"] = zeros((config.latent_dim,))
    for name, t in params.items():
        t.name = name
    return params


# ---------------------------------------------------------------------------
# shared attention core
# ---------------------------------------------------------------------------


@dataclass
class _Part:
    """A run of tokens handled by one expert, in expert-sorted order."""

    expert: int
    x: Tensor  # (B, n, D)
    temb: Tensor | None = None  # (B, n, D) timestep embedding for parallel tokens


def _pre_norm(params, config: ModelConfig, layer: int, part: _Part, site: str) -> Tensor:
    h = rmsnorm(part.x, params[_p(layer, part.expert, f"{site}_norm")], config.norm_eps)
    if config.adaln_enabled and part.expert == PARALLEL and part.temb is not None:
        h = adaln_modulate(
            h, part.temb, params[f"layers.{layer}.adaln.{site}.w"], params[f"layers.{layer}.adaln.{site}.b"]
        )
    return h


def _cat(parts: list[Tensor], axis: int) -> Tensor:
    return parts[0] if len(parts) == 1 else nx.concat(parts, axis=axis)


def _attention(
    params,
    config: ModelConfig,
    layer: int,
    normed: list[tuple[int, Tensor]],
    mask: np.ndarray,
    pos: np.ndarray,
    past: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[list[Tensor], Tensor, Tensor]:
    """Joint attention over ``past`` keys/values plus the new tokens in ``normed``.

    Returns per-part output projections and the new tokens' keys/values
    (rotated, before head repetition) with shape (B, KV, n, head_dim).
    """
    H, KV, hd = config.n_heads, config.n_kv_heads, config.head_dim
    qs, ks, vs, sizes = [], [], [], []
    for expert, h in normed:
        B, n, _ = h.shape
        q = nx.reshape(nx.matmul(h, params[_p(layer, expert, "wq")]), (B, n, H, hd))
        k = nx.reshape(nx.matmul(h, params[_p(layer, expert, "wk")]), (B, n, KV, hd))
        v = nx.reshape(nx.matmul(h, params[_p(layer, expert, "wv")]), (B, n, KV, hd))
        q, k = qk_norm(q, k, params[_p(layer, expert, "q_norm")], params[_p(layer, expert, "k_norm")], config.norm_eps)
        qs.append(q)
        ks.append(k)
        vs.append(v)
        sizes.append(n)
    q = nx.transpose(apply_rope(_cat(qs, 1), pos, config.rope_base), (0, 2, 1, 3))
    k_new = nx.transpose(apply_rope(_cat(ks, 1), pos, config.rope_base), (0, 2, 1, 3))
    v_new = nx.transpose(_cat(vs, 1), (0, 2, 1, 3))
    if past is not None and past[0].shape[2]:
        k = nx.concat([Tensor(past[0]), k_new], axis=2)
        v = nx.concat([Tensor(past[1]), v_new], axis=2)
    else:
        k, v = k_new, v_new
    if KV != H:
        rep = np.arange(H) // (H // KV)
        k = nx.take(k, rep, axis=1)
        v = nx.take(v, rep, axis=1)
    scores = nx.mul_scalar(nx.matmul(q, nx.transpose(k)), 1.0 / math.sqrt(hd))
    if mask.shape != scores.shape[-2:]:
        raise ContractError(f"mask {mask.shape} does not match attention of shape {scores.shape[-2:]}")
    probs = nx.softmax_masked(scores, mask)
    out = nx.transpose(nx.matmul(probs, v), (0, 2, 1, 3))
    B, n_total = out.shape[0], out.shape[1]
    out = nx.reshape(out, (B, n_total, H * hd))
    outs, start = [], 0
    for (expert, _), n in zip(normed, sizes):
        piece = out if len(sizes) == 1 else nx.slice_axis(out, start, start + n, axis=1)
        outs.append(nx.matmul(piece, params[_p(layer, expert, "wo")]))
        start += n
    return outs, k_new, v_new


def _run(
    params,
    config: ModelConfig,
    parts: list[_Part],
    mask: np.ndarray,
    pos: np.ndarray,
    cache: "ForwardState | None" = None,
) -> tuple[list[Tensor], list[tuple[np.ndarray, np.ndarray]]]:
    new_kv = []
    xs = [p.x for p in parts]
    for layer in range(config.n_layers):
        cur = [_Part(p.expert, x, p.temb) for p, x in zip(parts, xs)]
        normed = [(p.expert, _pre_norm(params, config, layer, p, "attn")) for p in cur]
        past = (cache.keys[layer], cache.values[layer]) if cache is not None else None
        outs, k_new, v_new = _attention(params, config, layer, normed, mask, pos, past)
        new_kv.append((k_new.data, v_new.data))
        xs = [nx.add(x, o) for x, o in zip(xs, outs)]
        cur = [_Part(p.expert, x, p.temb) for p, x in zip(parts, xs)]
        xs = [
            nx.add(
                p.x,
                swiglu_ffn(
                    _pre_norm(params, config, layer, p, "ffn"),
                    params[_p(layer, p.expert, "w_gate")],
                    params[_p(layer, p.expert, "w_up")],
                    params[_p(layer, p.expert, "w_down")],
                ),
            )
            for p in cur
        ]
    finals = [
        rmsnorm(x, params[f"final_norm.{EXPERT_NAMES[p.expert]}"], config.norm_eps) for p, x in zip(parts, xs)
    ]
    return finals, new_kv


def gqa_attention(
    x: Tensor,
    mask,
    pos,
    expert_assignment: np.ndarray,
    params,
    config: ModelConfig,
    layer: int,
) -> Tensor:
    """One shared attention sublayer over (already normalized) hidden states in sequence order.

    Tokens are projected by their own expert's weights; the result is the
    expert-specific output projection, before the residual add.
    """
    bits = np.asarray(getattr(mask, "bits", mask), dtype=bool)
    positions = np.asarray(getattr(pos, "pos", pos))
    n = x.shape[1]
    if bits.shape != (n, n):
        raise ContractError(f"mask of shape {bits.shape} for a sequence of {n} tokens")
    experts = np.asarray(expert_assignment)
    order = np.argsort(experts, kind="stable")
    inverse = np.argsort(order)
    normed = []
    for e in (SERIAL, PARALLEL):
        idx = order[experts[order] == e]
        if idx.size:
            normed.append((e, nx.take(x, idx, axis=1)))
    outs, _, _ = _attention(params, config, layer, normed, bits[np.ix_(order, order)], positions[order])
    return nx.take(_cat(outs, 1), inverse, axis=1)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


@dataclass
class CompiledLayout:
    layout: SequenceLayout
    serial_idx: np.ndarray
    parallel_idx: np.ndarray
    mask_sorted: np.ndarray
    pos_sorted: np.ndarray
    condition_serial: np.ndarray  # bool over serial tokens: belongs to a condition segment
    block_of_parallel: np.ndarray  # ordinal of the parallel segment for each parallel token


_LAYOUT_CACHE: dict[SequenceLayout, CompiledLayout] = {}


def compile_layout(layout: SequenceLayout) -> CompiledLayout:
    hit = _LAYOUT_CACHE.get(layout)
    if hit is not None:
        return hit
    for seg in layout.segments:
        if seg.modality == "latent3d" and seg.mode != "parallel":
            raise LayoutError("latent3d segments must be parallel")
        if seg.modality != "latent3d" and seg.mode != "serial":
            raise LayoutError(f"{seg.modality} segments must be serial")
    modes = layout.token_modes
    serial_idx = np.flatnonzero(modes == 0)
    parallel_idx = np.flatnonzero(modes == 1)
    order = np.concatenate([serial_idx, parallel_idx])
    mask = compile_mask(layout).bits
    pos = assign_positions(layout).pos
    modalities = np.array(layout.token_modalities)
    seg_ids = layout.token_segments
    par_segments = [k for k, s in enumerate(layout.segments) if s.parallel]
    block_ord = np.array([par_segments.index(s) for s in seg_ids[parallel_idx]], dtype=np.int64)
    compiled = CompiledLayout(
        layout=layout,
        serial_idx=serial_idx,
        parallel_idx=parallel_idx,
        mask_sorted=mask[np.ix_(order, order)],
        pos_sorted=pos[order],
        condition_serial=modalities[serial_idx] == "condition",
        block_of_parallel=block_ord,
    )
    if len(_LAYOUT_CACHE) > 256:
        _LAYOUT_CACHE.clear()
    _LAYOUT_CACHE[layout] = compiled
    return compiled


@dataclass
class ForwardState:
    """Per-layer key/value cache over finalized context tokens.

    Rows of the batch are independent contexts; guided generation keeps the
    conditional context in row 0 and the condition-dropped one in row 1.
    """

    batch: int
    keys: list[np.ndarray]
    values: list[np.ndarray]
    positions: list[int] = field(default_factory=list)
    groups: list[int] = field(default_factory=list)
    next_pos: int = 0
    next_group: int = 0
    forward_passes: int = 0  # one per batch row per call, every kind of pass
    velocity_passes: int = 0  # the subset spent on blocks under ODE integration

    @classmethod
    def empty(cls, config: ModelConfig, batch: int = 1) -> "ForwardState":
        shape = (batch, config.n_kv_heads, 0, config.head_dim)
        return cls(
            batch=batch,
            keys=[np.zeros(shape, dtype=config.dtype) for _ in range(config.n_layers)],
            values=[np.zeros(shape, dtype=config.dtype) for _ in range(config.n_layers)],
        )

    @property
    def length(self) -> int:
        return len(self.positions)

    def copy(self) -> "ForwardState":
        return ForwardState(
            self.batch,
            [k.copy() for k in self.keys],
            [v.copy() for v in self.values],
            list(self.positions),
            list(self.groups),
            self.next_pos,
            self.next_group,
            self.forward_passes,
            self.velocity_passes,
        )

    def _append(self, new_kv, n: int, parallel: bool) -> None:
        for layer, (k, v) in enumerate(new_kv):
            if k.shape[0] != self.batch or k.shape[2] != n:
                raise ContractError("cache update does not match state batch/length")
            self.keys[layer] = np.concatenate([self.keys[layer], k], axis=2)
            self.values[layer] = np.concatenate([self.values[layer], v], axis=2)
        if parallel:
            self.positions += [self.next_pos] * n
            self.groups += [self.next_group] * n
            self.next_pos += 1
            self.next_group += 1
        else:
            self.positions += list(range(self.next_pos, self.next_pos + n))
            self.groups += list(range(self.next_group, self.next_group + n))
            self.next_pos += n
            self.next_group += n
        if any(k.shape[2] != len(self.positions) for k in self.keys):
            raise ContractError("cache length and position bookkeeping disagree")


class Model:
    """Parameters plus the forward paths of the hybrid transformer."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)

    # -- embeddings ---------------------------------------------------------

    def _serial_embed(self, tokens: np.ndarray, drop: np.ndarray | None, cond_mask: np.ndarray) -> Tensor:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.config.vocab_size):
            raise LayoutError(f"token id out of range for vocabulary of {self.config.vocab_size}")
        emb = nx.embedding(self.params["tok_emb"], tokens)
        if drop is None:
            return emb
        m = (np.asarray(drop, dtype=bool)[:, None] & np.asarray(cond_mask, dtype=bool)[None, :])
        if not m.any():
            return emb
        m = m[..., None].astype(self.config.dtype)
        return nx.add(nx.mul(emb, 1.0 - m), nx.mul(self.params["null_emb"], m))

    def _time_embed(self, t: np.ndarray) -> Tensor:
        feats = Tensor(timestep_embedding(t, self.config.d_model, self.config.dtype))
        return _linear(feats, self.params["time.w"], self.params["time.b"])

    def _parallel_embed(self, latents, t: np.ndarray) -> tuple[Tensor, Tensor]:
        lat = latents if isinstance(latents, Tensor) else Tensor(np.asarray(latents, dtype=self.config.dtype))
        if lat.shape[-1] != self.config.latent_dim:
            raise ContractError(f"latent dim {lat.shape[-1]} != {self.config.latent_dim}")
        temb = self._time_embed(t)
        x = nx.add(_linear(lat, self.params["connector.w"], self.params["connector.b"]), temb)
        return x, temb

    def text_logits(self, h: Tensor) -> Tensor:
        return _linear(h, self.params["text_head.w"], self.params["text_head.b"])

    def velocity(self, h: Tensor) -> Tensor:
        return _linear(h, self.params["flow_head.w"], self.params["flow_head.b"])

    # -- full-sequence forward ----------------------------------------------

    def forward(
        self,
        layout: SequenceLayout,
        tokens=None,
        latents=None,
        t=None,
        drop_condition=None,
    ) -> dict[str, Tensor | None]:
        """Full-sequence forward.

        ``tokens``: (B, n_serial) ids in sequence order. ``latents``: (B, n_parallel,
        latent_dim) noisy latents ``x_t``. ``t``: flow time per sample and block,
        shape (B, n_blocks), (B,) or scalar. ``drop_condition``: (B,) bools; dropped
        rows see the null embedding on every condition token.
        """
        cl = compile_layout(layout)
        ns, np_ = cl.serial_idx.size, cl.parallel_idx.size
        parts: list[_Part] = []
        B = None
        if ns:
            tokens = np.asarray(tokens, dtype=np.int64)
            if tokens.ndim == 1:
                tokens = tokens[None]
            if tokens.shape[1] != ns:
                raise ContractError(f"layout has {ns} serial tokens, got {tokens.shape[1]}")
            B = tokens.shape[0]
            parts.append(_Part(SERIAL, self._serial_embed(tokens, drop_condition, cl.condition_serial)))
        if np_:
            lat = latents if isinstance(latents, Tensor) else Tensor(np.asarray(latents, dtype=self.config.dtype))
            if lat.ndim == 2:
                lat = nx.reshape(lat, (1,) + lat.shape)
            if lat.shape[1] != np_:
                raise ContractError(f"layout has {np_} parallel tokens, got {lat.shape[1]}")
            if B is not None and lat.shape[0] != B:
                raise ContractError("token and latent batch sizes differ")
            B = lat.shape[0]
            n_blocks = int(cl.block_of_parallel.max()) + 1
            tt = _block_times(t, B, n_blocks)
            x, temb = self._parallel_embed(lat, tt[:, cl.block_of_parallel])
            parts.append(_Part(PARALLEL, x, temb))
        finals, _ = _run(self.params, self.config, parts, cl.mask_sorted, cl.pos_sorted)
        out: dict[str, Tensor | None] = {"logits": None, "velocity": None}
        for p, h in zip(parts, finals):
            if p.expert == SERIAL:
                out["logits"] = self.text_logits(h)
            else:
                out["velocity"] = self.velocity(h)
        return out

    # -- incremental paths ----------------------------------------------------

    def new_state(self, batch: int = 1) -> ForwardState:
        return ForwardState.empty(self.config, batch)

    def _extend(self, state: ForwardState, part: _Part, parallel: bool, finalize: bool) -> Tensor:
        n = part.x.shape[1]
        if part.x.shape[0] != state.batch:
            raise ContractError(f"input batch {part.x.shape[0]} != state batch {state.batch}")
        if len(state.positions) != state.keys[0].shape[2]:
            raise ContractError("cache/position mismatch")
        ctx = state.length
        own = np.ones((n, n), dtype=bool) if parallel else np.tril(np.ones((n, n), dtype=bool))
        mask = np.concatenate([np.ones((n, ctx), dtype=bool), own], axis=1)
        pos = np.full(n, state.next_pos) if parallel else state.next_pos + np.arange(n)
        finals, new_kv = _run(self.params, self.config, [part], mask, pos, cache=state)
        state.forward_passes += state.batch
        if finalize:
            state._append(new_kv, n, parallel)
        return finals[0]

    def prefill_serial(self, state: ForwardState, tokens, condition=None, drop=None) -> np.ndarray:
        """Append serial tokens (B, n) to the context; returns next-token logits (B, n, V).

        ``condition`` flags which of the n tokens belong to a condition segment;
        rows with ``drop`` set see the null embedding there.
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = np.broadcast_to(tokens[None], (state.batch, tokens.size))
        cond = np.zeros(tokens.shape[1], dtype=bool) if condition is None else np.asarray(condition, dtype=bool)
        x = self._serial_embed(tokens, drop, cond)
        h = self._extend(state, _Part(SERIAL, x), parallel=False, finalize=True)
        return self.text_logits(h).data

    def decode_step_serial(self, state: ForwardState, token, condition: bool = False, drop=None) -> np.ndarray:
        token = np.asarray(token, dtype=np.int64).reshape(-1)
        if token.size == 1:
            token = np.repeat(token, state.batch)
        logits = self.prefill_serial(state, token[:, None], condition=[condition], drop=drop)
        return logits[:, -1]

    def block_velocity(self, state: ForwardState, x_t, t: float) -> np.ndarray:
        """Velocity for a block of noisy latents (B, n, latent_dim) at flow time ``t``; cache untouched."""
        x_t = np.asarray(x_t, dtype=self.config.dtype)
        x, temb = self._parallel_embed(Tensor(x_t), np.full(x_t.shape[:2], t))
        h = self._extend(state, _Part(PARALLEL, x, temb), parallel=True, finalize=False)
        state.velocity_passes += state.batch
        return self.velocity(h).data

    def finalize_block(self, state: ForwardState, clean_block) -> None:
        """Append a clean block (flow time 0) to the context."""
        clean = np.asarray(clean_block, dtype=self.config.dtype)
        if clean.ndim == 2:
            clean = np.broadcast_to(clean[None], (state.batch,) + clean.shape)
        x, temb = self._parallel_embed(Tensor(clean), np.zeros(clean.shape[:2]))
        self._extend(state, _Part(PARALLEL, x, temb), parallel=True, finalize=True)

    def parameter_count(self) -> int:
        return int(sum(t.size for t in self.params.values()))


def expert_assignment(layout: SequenceLayout) -> np.ndarray:
    return layout.token_modes.copy()


def _block_times(t, batch: int, n_blocks: int) -> np.ndarray:
    tt = np.asarray(0.0 if t is None else t, dtype=np.float64)
    if tt.ndim == 0:
        tt = np.full((batch, n_blocks), float(tt))
    elif tt.ndim == 1 and tt.size == batch:
        tt = np.repeat(tt[:, None], n_blocks, axis=1)
    elif tt.ndim == 2 and tt.shape == (batch, 1):
        tt = np.repeat(tt, n_blocks, axis=1)
    if tt.shape != (batch, n_blocks):
        raise ContractError(f"t must give one time per sample and block, got shape {np.shape(t)}")
    return tt
