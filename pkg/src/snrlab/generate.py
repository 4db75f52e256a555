"""Euler sampling of the learned velocity field, with guidance and condition switching."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DivergenceError
from .net import Cond, DenoiserParams, forward
from .schedule import shift_time


@dataclass(frozen=True)
class GenerationConfig:
    steps: int = 28
    guidance_scale: float = 7.0
    shift: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.guidance_scale < 0:
            raise ValueError("guidance scale must be >= 0")
        if not self.shift > 0:
            raise ValueError("shift must be > 0")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class SwitchPlan:
    cond_early: Cond
    cond_late: Cond
    switch_fraction: float

    def __post_init__(self):
        if not 0.0 <= self.switch_fraction <= 1.0:
            raise ValueError("switch fraction must lie in [0, 1]")
        if len(self.cond_early) != len(self.cond_late):
            raise ValueError("early and late conditions must have the same length")

    def early_steps(self, steps: int) -> int:
        # round() guards against 0.1 * 30 = 3.0000000000000004
        return math.ceil(round(self.switch_fraction * steps, 9))


def time_grid(steps: int, shift: float = 1.0) -> np.ndarray:
    """Decreasing grid from exactly 1 to exactly 0, optionally shift-warped."""
    grid = 1.0 - np.arange(steps + 1, dtype=np.float64) / steps
    if shift != 1.0:
        grid = shift_time(grid, shift)
    # the warp can round k / (1 + (k - 1)) away from 1
    grid[0], grid[-1] = 1.0, 0.0
    return grid


def guided_velocity(params: DenoiserParams, x_t, t, cond: Cond, scale: float, adapter=None):
    """Classifier-free guidance ``v_u + s (v_c - v_u)``.

    s = 1 and s = 0 return the single branch directly (exact, one forward pass).
    """
    if scale < 0:
        raise ValueError("guidance scale must be >= 0")
    if scale == 1.0:
        return forward(params, x_t, t, cond, adapter=adapter)
    v_u = forward(params, x_t, t, Cond.null(len(cond)), adapter=adapter)
    if scale == 0.0:
        return v_u
    v_c = forward(params, x_t, t, cond, adapter=adapter)
    return v_u + scale * (v_c - v_u)


def _integrate(params, cond_at_step, n, cfg: GenerationConfig, rng, adapter):
    x = rng.standard_normal((n,) + params.arch.image_shape).astype(params.dtype)
    grid = time_grid(cfg.steps, cfg.shift)
    for i in range(cfg.steps):
        v = guided_velocity(params, x, grid[i], cond_at_step(i), cfg.guidance_scale, adapter=adapter)
        x = x - (grid[i] - grid[i + 1]) * v
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"sampler state went non-finite at step {i}")
    return x


def euler_sample(params: DenoiserParams, cond: Cond, cfg: GenerationConfig, rng=None, adapter=None):
    """Integrate from Gaussian noise at t=1 down to t=0; one sample per condition row."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    return _integrate(params, lambda i: cond, len(cond), cfg, rng, adapter)


def switched_sample(params: DenoiserParams, plan: SwitchPlan, cfg: GenerationConfig, rng=None, adapter=None):
    """Use ``cond_early`` for the first ceil(f * steps) steps, ``cond_late`` after."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    k = plan.early_steps(cfg.steps)
    return _integrate(params, lambda i: plan.cond_early if i < k else plan.cond_late, len(plan.cond_late), cfg, rng, adapter)


def to_uint8(images) -> np.ndarray:
    """Map [-1, 1] CHW images to HWC uint8."""
    x = np.clip(np.asarray(images, dtype=np.float64), -1.0, 1.0)
    u8 = np.round((x + 1.0) * 127.5).astype(np.uint8)
    return np.moveaxis(u8, -3, -1)
