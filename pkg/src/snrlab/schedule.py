"""Rectified-flow noise schedule algebra.

The forward process interpolates linearly between data and noise,

    x_t = (1 - t) * x_0 + t * eps,    t in [0, 1],

so alpha_t = 1 - t and sigma_t = t. The log signal-to-noise ratio is

    lambda_t = log(alpha_t^2 / sigma_t^2) = 2 * log((1 - t) / t)

and the timestep shift t -> k t / (1 + (k - 1) t) is the same thing as
translating lambda by -2 log k.

Everything here is float64 and accepts scalars or arrays. Nothing is clamped:
passing t in {0, 1} to a log-SNR conversion raises instead of returning inf.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

__all__ = [
    "NoiseSchedule",
    "coefficients",
    "log_snr",
    "time_of_log_snr",
    "shift_time",
    "shift_log_snr",
]


def _as_float(x):
    arr = np.asarray(x, dtype=np.float64)
    return arr


def _out(arr, like):
    # Scalars in, Python floats out.
    if np.ndim(like) == 0:
        return float(arr)
    return arr


def _check_shift(k) -> None:
    if not np.all(np.asarray(k, dtype=np.float64) > 0):
        raise ValueError(f"shift factor must be > 0, got {k!r}")


def coefficients(t):
    """Return ``(alpha, sigma) = (1 - t, t)`` for t in [0, 1]."""
    tt = _as_float(t)
    if np.any(~np.isfinite(tt)) or np.any(tt < 0.0) or np.any(tt > 1.0):
        raise ValueError("t must lie in [0, 1]")
    return _out(1.0 - tt, t), _out(tt.copy(), t)


def log_snr(t):
    """``2 * log((1 - t) / t)``; requires 0 < t < 1."""
    tt = _as_float(t)
    if np.any(~(tt > 0.0)) or np.any(~(tt < 1.0)):
        raise ValueError("log-SNR is only finite for 0 < t < 1")
    return _out(2.0 * (np.log1p(-tt) - np.log(tt)), t)


def time_of_log_snr(lam):
    """Inverse of :func:`log_snr`: ``t = 1 / (1 + exp(lam / 2))``."""
    ll = _as_float(lam)
    if np.any(~np.isfinite(ll)):
        raise ValueError("log-SNR must be finite")
    return _out(expit(-0.5 * ll), lam)


def shift_time(t, k):
    """Warp timesteps toward noise (k > 1) or data (k < 1).

    ``t_new = k t / (1 + (k - 1) t)``; a monotone bijection of [0, 1] that
    fixes both endpoints.
    """
    _check_shift(k)
    tt = _as_float(t)
    if np.any(~np.isfinite(tt)) or np.any(tt < 0.0) or np.any(tt > 1.0):
        raise ValueError("t must lie in [0, 1]")
    kk = np.asarray(k, dtype=np.float64)
    return _out(kk * tt / (1.0 + (kk - 1.0) * tt), t)


def shift_log_snr(lam, k):
    """Translate log-SNR by ``-2 log k``; matches :func:`shift_time` in t-space."""
    _check_shift(k)
    ll = _as_float(lam)
    return _out(ll - 2.0 * np.log(np.asarray(k, dtype=np.float64)), lam)


@dataclass(frozen=True)
class NoiseSchedule:
    """Rectified-flow schedule with an optional timestep shift baked in.

    Only ``kind="rectified_flow"`` exists; the field is kept so that callers
    can check what they are holding.
    """

    shift: float = 1.0
    kind: str = "rectified_flow"

    def __post_init__(self):
        if self.kind != "rectified_flow":
            raise ValueError(f"unsupported schedule kind {self.kind!r}")
        _check_shift(self.shift)

    def warp(self, t):
        return t if self.shift == 1.0 else shift_time(t, self.shift)

    def coefficients(self, t):
        return coefficients(self.warp(t))

    def log_snr(self, t):
        return log_snr(self.warp(t))
