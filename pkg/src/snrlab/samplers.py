"""Training-time distributions over noise levels.

Every sampler is described in log-SNR space, since that is where the
comparison is cleanest: the Gaussian-family samplers are all Normal in
lambda, and a timestep shift is just a translation. Densities in t follow by
change of variables with |d lambda / d t| = 2 / (t (1 - t)).

    UniformTime            t ~ U(0, 1)
    LogitNormal(m, s)      logit(t) ~ N(m, s^2)        =>  lambda ~ N(-2m, 4 s^2)
    StyleFriendly(mu, sd)  lambda ~ N(mu, sd^2)
    EdmLogNormal(Pm, Ps)   log(noise std) ~ N(Pm, Ps^2) =>  lambda ~ N(-2 Pm, 4 Ps^2)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from .schedule import log_snr, time_of_log_snr

__all__ = [
    "SnrSampler",
    "UniformTime",
    "LogitNormal",
    "StyleFriendly",
    "EdmLogNormal",
    "DensityTable",
    "emit_density_table",
    "sampler_from_dict",
    "LAMBDA_GRID_BOUNDS",
]

# wide enough that every built-in sampler keeps all but ~1e-8 of its mass
LAMBDA_GRID_BOUNDS = (-40.0, 40.0)


@dataclass(frozen=True)
class SnrSampler:
    """Base class. Subclasses define the unshifted lambda distribution."""

    shift: float = field(default=1.0, kw_only=True)

    def __post_init__(self):
        if not self.shift > 0:
            raise ValueError(f"shift must be > 0, got {self.shift}")

    @property
    def offset(self) -> float:
        """Translation applied to lambda by the shift factor."""
        return -2.0 * math.log(self.shift)

    # -- unshifted pieces, overridden below
    def _draw_lambda(self, rng: np.random.Generator, n: int) -> np.ndarray:
        raise NotImplementedError

    def _pdf0(self, lam: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _cdf0(self, lam: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    # -- public API
    def sample(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Draw ``n`` noise levels; returns ``(lam, t)`` arrays."""
        if n < 1:
            raise ValueError("n must be >= 1")
        lam = self._draw_lambda(rng, n)
        if self.shift != 1.0:
            lam = lam + self.offset
        return lam, time_of_log_snr(lam)

    def density_lambda(self, lam):
        ll = np.asarray(lam, dtype=np.float64)
        p = self._pdf0(ll - self.offset)
        return float(p) if np.ndim(lam) == 0 else p

    def cdf_lambda(self, lam):
        ll = np.asarray(lam, dtype=np.float64)
        c = self._cdf0(ll - self.offset)
        return float(c) if np.ndim(lam) == 0 else c

    def density_time(self, t):
        tt = np.asarray(t, dtype=np.float64)
        lam = log_snr(tt)  # raises at t in {0, 1}
        p = self.density_lambda(lam) * 2.0 / (tt * (1.0 - tt))
        return float(p) if np.ndim(t) == 0 else p

    def mass(self, lam_min: float, lam_max: float) -> float:
        """Probability that lambda falls in ``[lam_min, lam_max]``."""
        return float(self.cdf_lambda(lam_max) - self.cdf_lambda(lam_min))

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class UniformTime(SnrSampler):
    def _draw_lambda(self, rng, n):
        t = rng.random(n)
        # random() is [0, 1); t == 0 has no finite log-SNR.
        while np.any(t == 0.0):
            bad = t == 0.0
            t[bad] = rng.random(int(bad.sum()))
        return log_snr(t)

    def _pdf0(self, lam):
        t = expit(-0.5 * lam)
        return 0.5 * t * (1.0 - t)

    def _cdf0(self, lam):
        # P(Lambda <= l) = P(t >= t(l)) = 1 - t(l)
        return expit(0.5 * lam)

    def density_time(self, t):
        if self.shift != 1.0:
            return super().density_time(t)
        tt = np.asarray(t, dtype=np.float64)
        log_snr(tt)  # domain check only
        return 1.0 if np.ndim(t) == 0 else np.ones_like(tt)

    def to_dict(self):
        return {"kind": "uniform_time", "shift": self.shift}


@dataclass(frozen=True)
class _GaussianLambda(SnrSampler):
    @property
    def lambda_mean(self) -> float:
        raise NotImplementedError

    @property
    def lambda_std(self) -> float:
        raise NotImplementedError

    def _pdf0(self, lam):
        return norm.pdf(lam, loc=self.lambda_mean, scale=self.lambda_std)

    def _cdf0(self, lam):
        return norm.cdf(lam, loc=self.lambda_mean, scale=self.lambda_std)


@dataclass(frozen=True)
class StyleFriendly(_GaussianLambda):
    """Log-SNR drawn directly from ``N(mu, sigma^2)``; mu < 0 favours high noise."""

    mu: float = -6.0
    sigma: float = 2.0

    def __post_init__(self):
        super().__post_init__()
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")

    @property
    def lambda_mean(self):
        return self.mu

    @property
    def lambda_std(self):
        return self.sigma

    def _draw_lambda(self, rng, n):
        return rng.normal(self.mu, self.sigma, n)

    def to_dict(self):
        return {"kind": "style_friendly", "mu": self.mu, "sigma": self.sigma, "shift": self.shift}


@dataclass(frozen=True)
class LogitNormal(_GaussianLambda):
    """SD3-style sampler: ``logit(t) ~ N(m, s^2)``."""

    m: float = 0.0
    s: float = 1.0

    def __post_init__(self):
        super().__post_init__()
        if not self.s > 0:
            raise ValueError("s must be > 0")

    @property
    def lambda_mean(self):
        return -2.0 * self.m

    @property
    def lambda_std(self):
        return 2.0 * self.s

    def _draw_lambda(self, rng, n):
        g = rng.normal(self.m, self.s, n)
        # logit(t) = -lambda / 2
        return -2.0 * g

    def to_dict(self):
        return {"kind": "logit_normal", "m": self.m, "s": self.s, "shift": self.shift}


@dataclass(frozen=True)
class EdmLogNormal(_GaussianLambda):
    """EDM's log-normal noise std, mapped into lambda via ``lambda = -2 log(std)``."""

    p_mean: float = -1.2
    p_std: float = 1.2

    def __post_init__(self):
        super().__post_init__()
        if not self.p_std > 0:
            raise ValueError("p_std must be > 0")

    @property
    def lambda_mean(self):
        return -2.0 * self.p_mean

    @property
    def lambda_std(self):
        return 2.0 * self.p_std

    def _draw_lambda(self, rng, n):
        log_std = rng.normal(self.p_mean, self.p_std, n)
        return -2.0 * log_std

    def to_dict(self):
        return {"kind": "edm_lognormal", "p_mean": self.p_mean, "p_std": self.p_std, "shift": self.shift}


_KINDS = {
    "uniform_time": UniformTime,
    "logit_normal": LogitNormal,
    "style_friendly": StyleFriendly,
    "edm_lognormal": EdmLogNormal,
}


def sampler_from_dict(d: dict) -> SnrSampler:
    """Build a sampler from ``{"kind": ..., <params>, "shift": k}``."""
    d = dict(d)
    kind = d.pop("kind", None)
    if kind not in _KINDS:
        raise ValueError(f"unknown sampler kind {kind!r}; expected one of {sorted(_KINDS)}")
    try:
        return _KINDS[kind](**d)
    except TypeError as exc:
        raise ValueError(f"bad parameters for sampler {kind!r}: {exc}") from None


@dataclass
class DensityTable:
    lam: np.ndarray
    p_lam: np.ndarray
    t: np.ndarray
    p_t: np.ndarray

    @property
    def lam_step(self) -> float:
        return float(self.lam[1] - self.lam[0])

    @property
    def t_step(self) -> float:
        return float(self.t[1] - self.t[0])

    def integral_lambda(self) -> float:
        return float(self.p_lam.sum() * self.lam_step)

    def integral_time(self) -> float:
        return float(self.p_t.sum() * self.t_step)


def emit_density_table(
    sampler: SnrSampler,
    grid: int,
    lam_bounds: tuple[float, float] = LAMBDA_GRID_BOUNDS,
) -> DensityTable:
    """Tabulate the sampler's density on even grids in lambda and t.

    The lambda grid covers ``lam_bounds`` with cell centres, the t grid covers
    (0, 1) likewise, so ``sum(p) * step`` is a midpoint-rule integral.
    """
    if grid < 2:
        raise ValueError("grid must be >= 2")
    lo, hi = lam_bounds
    if not lo < hi:
        raise ValueError("lambda bounds must be increasing")
    dl = (hi - lo) / grid
    lam = lo + dl * (np.arange(grid) + 0.5)
    t = (np.arange(grid) + 0.5) / grid
    return DensityTable(lam, sampler.density_lambda(lam), t, sampler.density_time(t))
