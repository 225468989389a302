"""Rectified flow: linear noise/data paths, velocity targets, sampling and guidance."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from .model import Model, ForwardState
from .numerics import NumericError, ShapeError, Tensor


@dataclass
class FlowSchedule:
    num_steps: int = 50
    cfg_scale: float = 7.5
    timestep_loc: float = 0.0
    timestep_scale: float = 1.0

    def __post_init__(self):
        if int(self.num_steps) < 1:
            raise ValueError(f"num_steps must be >= 1, got {self.num_steps}")
        if not self.timestep_scale > 0:
            raise ValueError(f"timestep_scale must be > 0, got {self.timestep_scale}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FlowBatch:
    x0: np.ndarray
    eps: np.ndarray
    t: np.ndarray
    x_t: np.ndarray
    v_target: np.ndarray

    @classmethod
    def draw(cls, x0: np.ndarray, rng: np.random.Generator, schedule: FlowSchedule) -> "FlowBatch":
        """Noise and one logit-normal time per sample (leading axis)."""
        eps = rng.standard_normal(x0.shape).astype(x0.dtype)
        t = sample_timestep(rng, schedule.timestep_loc, schedule.timestep_scale, size=x0.shape[0])
        tb = t.reshape((-1,) + (1,) * (x0.ndim - 1)).astype(x0.dtype)
        return cls(x0, eps, t, interpolate(x0, eps, tb), velocity_target(x0, eps))


def _same_shape(a, b, op: str) -> None:
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"{op}: shapes {np.shape(a)} and {np.shape(b)} differ")


def interpolate(x0, eps, t):
    """``x_t = (1 - t) x0 + t eps``."""
    _same_shape(x0, eps, "interpolate")
    if np.any(np.asarray(t) < 0) or np.any(np.asarray(t) > 1):
        raise ValueError("t must lie in [0, 1]")
    x0, eps = np.asarray(x0), np.asarray(eps)
    return (1 - t) * x0 + t * eps


def velocity_target(x0, eps):
    _same_shape(x0, eps, "velocity_target")
    return np.asarray(eps) - np.asarray(x0)


def flow_loss(v_pred: Tensor, v_target) -> Tensor:
    """Mean squared error over all elements."""
    target = nx.as_tensor(v_target, like=v_pred)
    _same_shape(v_pred.data, target.data, "flow_loss")
    if v_pred.size == 0:
        raise ShapeError("flow_loss over an empty batch")
    diff = nx.sub(v_pred, target)
    return nx.mean(nx.mul(diff, diff))


def sample_timestep(rng: np.random.Generator, loc: float = 0.0, scale: float = 1.0, size=None):
    """Logit-normal draw: ``sigmoid(loc + scale * z)``, z standard normal."""
    if not scale > 0:
        raise ValueError("scale must be positive")
    z = rng.standard_normal(size)
    t = 1.0 / (1.0 + np.exp(-(loc + scale * z)))
    # keep strictly inside (0, 1) even when the sigmoid saturates in float64
    tiny = np.finfo(np.float64).eps
    return np.clip(t, tiny, 1.0 - tiny)


def logit_normal_cdf(t, loc: float = 0.0, scale: float = 1.0):
    from scipy.special import ndtr

    t = np.asarray(t, dtype=np.float64)
    return ndtr((np.log(t) - np.log1p(-t) - loc) / scale)


def euler_sample(velocity_fn: Callable[[np.ndarray, float], np.ndarray], eps_init, num_steps: int):
    """Integrate ``dx/dt = v(x, t)`` from t = 1 to t = 0 on a uniform grid."""
    if int(num_steps) < 1:
        raise ValueError("num_steps must be >= 1")
    x = np.array(eps_init, copy=True)
    dt = 1.0 / num_steps
    for k in range(num_steps):
        t = 1.0 - k * dt
        v = np.asarray(velocity_fn(x, t))
        if not np.all(np.isfinite(v)):
            raise NumericError(f"non-finite velocity at step {k} (t={t:.4f})")
        x = x - dt * v
    return x


def cfg_combine(v_uncond, v_cond, s: float):
    _same_shape(v_uncond, v_cond, "cfg_combine")
    v_uncond, v_cond = np.asarray(v_uncond), np.asarray(v_cond)
    if s == 1.0:
        return v_cond.copy()  # u + (c - u) can differ from c in the last bit
    return v_uncond + s * (v_cond - v_uncond)


def generate_block(
    model: Model,
    state: ForwardState,
    block_len: int,
    schedule: FlowSchedule,
    rng: np.random.Generator,
) -> np.ndarray:
    """Generate one block of latents (block_len, latent_dim) and finalize it into ``state``.

    A one-row state runs plain conditional sampling. A two-row state holds the
    conditional context in row 0 and the condition-dropped context in row 1;
    each Euler step evaluates both and applies guidance.
    """
    if state.batch not in (1, 2):
        raise ValueError("generate_block expects a 1-row or a guided 2-row state")
    dim = model.config.latent_dim
    noise = rng.standard_normal((block_len, dim)).astype(model.config.dtype)

    def velocity(x, t):
        xb = np.broadcast_to(x[None], (state.batch,) + x.shape)
        v = model.block_velocity(state, xb, t)
        if state.batch == 1:
            return v[0]
        return cfg_combine(v[1], v[0], schedule.cfg_scale)

    clean = euler_sample(velocity, noise, schedule.num_steps).astype(model.config.dtype)
    model.finalize_block(state, clean)
    return clean
