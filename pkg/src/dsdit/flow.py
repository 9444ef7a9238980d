"""Rectified-flow objective, Euler ODE sampling and autoguidance.

Time runs from data (t=0) to noise (t=1); the target velocity is ``x1 - x0``
and sampling integrates t: 1 -> 0 with ``x <- x - dt * v``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from . import tensor as T
from .tensor import DimensionError, NumericError, Tensor

DEFAULT_STEPS = 40
DEFAULT_OMEGA = 1.2
FUSU_OMEGA = 1.1


class VelocityModel(Protocol):
    def __call__(self, xt: np.ndarray, t: np.ndarray | float, c_lr: np.ndarray,
                 c_ref: np.ndarray, lam: float) -> np.ndarray: ...


@dataclass
class SamplerConfig:
    steps: int = DEFAULT_STEPS
    lambda_weak: float = 0.0
    omega: float = DEFAULT_OMEGA
    guidance: bool = True
    seed: int = 0
    dump_dir: str | None = None

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.omega < 0:
            raise ValueError("omega must be >= 0")


@dataclass
class FlowSample:
    x0: np.ndarray
    x1: np.ndarray
    t: np.ndarray
    xt: np.ndarray = field(init=False)
    v_target: np.ndarray = field(init=False)

    def __post_init__(self):
        self.xt = interpolate(self.x0, self.x1, self.t)
        self.v_target = self.x1 - self.x0


def _time_column(t, ndim: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError(f"t must lie in [0, 1], got {t}")
    # per-sample times broadcast over the trailing axes
    return t.reshape(t.shape + (1,) * (ndim - t.ndim)) if t.ndim else t


def interpolate(x0, x1, t):
    """Straight-line interpolant ``(1 - t) x0 + t x1``; ``t`` may be per-sample."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise DimensionError(f"x0 {x0.shape} vs x1 {x1.shape}")
    tc = _time_column(t, x0.ndim)
    return (1.0 - tc) * x0 + tc * x1


def rf_loss(v_pred: Tensor, x0, x1) -> Tensor:
    """Mean squared error between predicted and straight-line velocity."""
    target = np.asarray(x1, dtype=np.float64) - np.asarray(x0, dtype=np.float64)
    if v_pred.shape != target.shape:
        raise DimensionError(f"prediction {v_pred.shape} vs target {target.shape}")
    return T.mean(T.square(T.sub(v_pred, Tensor(target))))


def sample_timestep(rng, size=None, schedule: str = "uniform"):
    if schedule == "uniform":
        return rng.uniform(0.0, 1.0, size)
    if schedule == "logit_normal":
        z = rng.normal(() if size is None else size)
        return 1.0 / (1.0 + np.exp(-z))
    raise ValueError(f"unknown timestep schedule {schedule!r}")


def autoguide(v_strong, v_weak, omega: float):
    """``(1 - omega) * v_weak + omega * v_strong``."""
    v_strong = np.asarray(v_strong, dtype=np.float64)
    v_weak = np.asarray(v_weak, dtype=np.float64)
    if v_strong.shape != v_weak.shape:
        raise DimensionError(f"strong {v_strong.shape} vs weak {v_weak.shape}")
    return (1.0 - omega) * v_weak + omega * v_strong


def guided_velocity(model: VelocityModel, x, t, c_lr, c_ref, cfg: SamplerConfig):
    if not cfg.guidance:
        return model(x, t, c_lr, c_ref, 1.0)
    strong = model(x, t, c_lr, c_ref, 1.0)
    weak = model(x, t, c_lr, c_ref, cfg.lambda_weak)
    return autoguide(strong, weak, cfg.omega)


def euler_sample(model: VelocityModel, x1, c_lr, c_ref, cfg: SamplerConfig,
                 velocity: Callable | None = None):
    """Integrate from noise ``x1`` at t=1 to t=0 on a uniform grid.

    ``velocity`` overrides how each step's velocity is obtained (used to plug in
    a fused two-pass guidance evaluation); it receives the same arguments as
    :func:`guided_velocity`.
    """
    x = np.array(x1, dtype=np.float64)
    dt = 1.0 / cfg.steps
    step_fn = velocity or guided_velocity
    for i in range(cfg.steps):
        t = 1.0 - i * dt
        v = np.asarray(step_fn(model, x, t, c_lr, c_ref, cfg))
        if v.shape != x.shape:
            raise DimensionError(f"model returned {v.shape}, state is {x.shape}")
        x = x - dt * v
        if not np.isfinite(x).all():
            raise NumericError(f"non-finite sampler state at step {i}")
        if cfg.dump_dir is not None:
            _dump_step(cfg.dump_dir, i, x, v)
    return x


def _dump_step(directory, i, x, v):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    T.write_dtns(d / f"step{i:03d}_xt.dtns", x)
    T.write_dtns(d / f"step{i:03d}_v.dtns", v)
