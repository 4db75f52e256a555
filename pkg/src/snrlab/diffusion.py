"""Forward process, velocity targets and the training objectives.

Losses return ``(loss, grads)`` where ``grads`` comes straight from
:func:`snrlab.net.backward`; pass ``wrt="adapter"`` when fine-tuning LoRA.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import DivergenceError
from .net import Cond, DenoiserParams, backward, forward
from .samplers import SnrSampler
from .schedule import log_snr, time_of_log_snr


def _per_item(t, n):
    return np.broadcast_to(np.asarray(t, dtype=np.float64), (n,)).reshape(n, 1, 1, 1)


def forward_diffuse(x0, eps, t):
    """``(1 - t) x0 + t eps``; t is a scalar or one value per leading item."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: x0 {x0.shape} vs eps {eps.shape}")
    tt = np.asarray(t, dtype=np.float64)
    if np.any(tt < 0) or np.any(tt > 1):
        raise ValueError("t must lie in [0, 1]")
    if tt.ndim == 1:
        tt = tt.reshape((-1,) + (1,) * (x0.ndim - 1))
    return (1.0 - tt) * x0 + tt * eps


def velocity_target(x0, eps):
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: x0 {x0.shape} vs eps {eps.shape}")
    return eps - x0


def sample_noise(rng: np.random.Generator, shape, offset_scale: float = 0.0, offset_rng=None) -> np.ndarray:
    """Standard Gaussian noise plus ``offset_scale * c``.

    ``c`` is one Gaussian scalar per (sample, channel), shared by every pixel,
    drawn from ``offset_rng`` when given (else from ``rng`` after the pixel noise).
    With ``offset_scale == 0`` no extra numbers are drawn, so the stream matches
    plain ``rng.standard_normal(shape)`` exactly.
    """
    if offset_scale < 0:
        raise ValueError("offset scale must be >= 0")
    eps = rng.standard_normal(shape)
    if offset_scale > 0:
        c = (rng if offset_rng is None else offset_rng).standard_normal(tuple(shape[:2]))
        eps = eps + offset_scale * c.reshape(c.shape + (1,) * (len(shape) - 2))
    return eps


@dataclass
class NoisyBatch:
    x0: np.ndarray
    eps: np.ndarray
    t: np.ndarray
    lam: np.ndarray
    x_t: np.ndarray
    target_v: np.ndarray

    @classmethod
    def build(cls, x0, eps, t=None, lam=None) -> "NoisyBatch":
        """Assemble a batch from clean images, noise and either t or lambda."""
        x0 = np.asarray(x0, dtype=np.float64)
        n = x0.shape[0]
        if (t is None) == (lam is None):
            raise ValueError("pass exactly one of t or lam")
        if lam is not None:
            lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), (n,)).copy()
            t = time_of_log_snr(lam)
        else:
            t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,)).copy()
            inner = (t > 0) & (t < 1)
            lam = np.full(n, np.nan)
            lam[inner] = log_snr(t[inner])
        return cls(x0, eps, t, lam, forward_diffuse(x0, eps, t), velocity_target(x0, eps))

    def __len__(self):
        return self.x0.shape[0]


@dataclass(frozen=True)
class DcoConfig:
    beta_T: float = 1.0

    def __post_init__(self):
        if not self.beta_T > 0:
            raise ValueError("beta_T must be > 0")

    def weight(self, t):
        # w(t) = 1 for velocity prediction.
        return np.ones_like(np.asarray(t, dtype=np.float64))


@dataclass(frozen=True)
class OffsetNoiseConfig:
    scale: float = 0.0

    def __post_init__(self):
        if not self.scale >= 0:
            raise ValueError("offset noise scale must be >= 0")


def _check_finite(loss: float, what: str):
    if not math.isfinite(loss):
        raise DivergenceError(f"{what} is not finite ({loss})")


def dm_loss(
    params: DenoiserParams,
    batch: NoisyBatch,
    cond: Cond,
    adapter=None,
    wrt: str = "base",
):
    """Mean over the batch of the per-item mean squared velocity error."""
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")
    pred, cache = forward(params, batch.x_t, batch.t, cond, adapter=adapter, return_cache=True)
    diff = pred - batch.target_v.astype(pred.dtype)
    d = diff[0].size
    loss = float(np.mean(np.square(diff, dtype=np.float64)))
    _check_finite(loss, "diffusion loss")
    grads = backward(params, cache, (2.0 / (n * d)) * diff, adapter=adapter, wrt=wrt)
    return loss, grads


def per_item_squared_error(params, batch: NoisyBatch, cond: Cond, adapter=None) -> np.ndarray:
    pred = forward(params, batch.x_t, batch.t, cond, adapter=adapter)
    diff = pred.astype(np.float64) - batch.target_v
    return np.mean(diff.reshape(len(batch), -1) ** 2, axis=1)


def dco_loss(
    params: DenoiserParams,
    phi_params: DenoiserParams,
    batch: NoisyBatch,
    cond: Cond,
    cfg: DcoConfig = DcoConfig(),
    adapter=None,
    phi_adapter=None,
    wrt: str | None = None,
):
    """``mean softplus(beta_T w(t) (se_theta - se_phi))``, i.e. ``-log sigmoid(-...)``.

    Gradients flow into theta (``params`` + ``adapter``) only; phi is evaluated
    without a cache and never differentiated. ``wrt`` defaults to the adapter
    when one is given, else the base weights.
    """
    if wrt is None:
        wrt = "base" if adapter is None else "adapter"
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")
    if params.arch != phi_params.arch:
        raise ValueError("theta and phi must share an architecture")
    pred, cache = forward(params, batch.x_t, batch.t, cond, adapter=adapter, return_cache=True)
    diff = pred - batch.target_v.astype(pred.dtype)
    d = diff[0].size
    se_theta = np.mean(np.square(diff, dtype=np.float64).reshape(n, -1), axis=1)
    se_phi = per_item_squared_error(phi_params, batch, cond, adapter=phi_adapter)
    z = cfg.beta_T * cfg.weight(batch.t) * (se_theta - se_phi)
    loss = float(np.mean(np.logaddexp(0.0, z)))
    _check_finite(loss, "DCO loss")
    # d softplus(z) / d se_theta = beta_T w sigmoid(z)
    coef = cfg.beta_T * cfg.weight(batch.t) * expit(z) / n
    upstream = (coef.reshape(n, 1, 1, 1) * (2.0 / d)) * diff
    grads = backward(params, cache, upstream, adapter=adapter, wrt=wrt)
    return loss, grads


def _mc(values: np.ndarray, return_stderr: bool):
    mean = float(values.mean())
    if not return_stderr:
        return mean
    return mean, float(values.std(ddof=1) / math.sqrt(len(values))) if len(values) > 1 else float("nan")


def _squared_errors_at(params, x0, cond_one, lam, rng, adapter, chunk):
    x0 = np.asarray(x0, dtype=np.float64)
    out = np.empty(len(lam))
    for lo in range(0, len(lam), chunk):
        ll = lam[lo : lo + chunk]
        m = len(ll)
        eps = rng.standard_normal((m,) + x0.shape)
        batch = NoisyBatch.build(np.broadcast_to(x0, (m,) + x0.shape), eps, lam=ll)
        cond = Cond.of(cond_one.content, cond_one.style, m)
        out[lo : lo + m] = per_item_squared_error(params, batch, cond, adapter=adapter)
    return out


def direct_loss(params, x0, cond: Cond, sampler: SnrSampler, rng, n: int, adapter=None, chunk=4096, return_stderr=False):
    """Monte Carlo estimate of E_{lambda ~ p}[squared error] for one image."""
    lam, _ = sampler.sample(rng, n)
    return _mc(_squared_errors_at(params, x0, cond, lam, rng, adapter, chunk), return_stderr)


def importance_weighted_loss(
    params,
    x0,
    cond: Cond,
    sampler: SnrSampler,
    rng,
    n: int,
    lam_min: float = -20.0,
    lam_max: float = 20.0,
    adapter=None,
    chunk=4096,
    return_stderr=False,
):
    """Same expectation, sampled uniformly in lambda and reweighted by p(lambda).

    ``E_{lambda ~ U(lam_min, lam_max)}[(lam_max - lam_min) p(lambda) se(lambda)]``
    """
    if not lam_min < lam_max:
        raise ValueError("need lam_min < lam_max")
    if n < 1:
        raise ValueError("n must be >= 1")
    lam = rng.uniform(lam_min, lam_max, n)
    se = _squared_errors_at(params, x0, cond, lam, rng, adapter, chunk)
    vals = (lam_max - lam_min) * sampler.density_lambda(lam) * se
    return _mc(vals, return_stderr)
