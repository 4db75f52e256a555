"""Pre-training on the multi-style corpus and LoRA fine-tuning on a reference style."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .diffusion import DcoConfig, NoisyBatch, OffsetNoiseConfig, dco_loss, dm_loss, sample_noise
from .errors import DivergenceError
from .lora import DEFAULT_TARGETS, LoraAdapter, attach, trainable_parameters
from .net import AdamState, Architecture, Cond, DenoiserParams, adam_step, drop_condition, init_params
from .samplers import LogitNormal, SnrSampler
from .styledata import StyleCorpus

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LoraConfig:
    targets: tuple[str, ...] | str = DEFAULT_TARGETS
    rank: int = 32
    alpha: float | None = None


@dataclass(frozen=True)
class TrainConfig:
    objective: str = "dm"
    sampler: SnrSampler = field(default_factory=LogitNormal)
    steps: int = 300
    lr: float = 1e-4
    grad_accum: int = 4
    batch_size: int = 1
    p_drop: float = 0.1
    p_drop_style: float = 0.0
    offset: OffsetNoiseConfig = field(default_factory=OffsetNoiseConfig)
    lora: LoraConfig | None = None
    beta_T: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.objective not in ("dm", "dco"):
            raise ValueError(f"objective must be 'dm' or 'dco', got {self.objective!r}")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.grad_accum < 1 or self.batch_size < 1:
            raise ValueError("grad_accum and batch_size must be >= 1")


class _Streams:
    """Independent generators per concern, so paired runs that differ only in
    the sampler (or only the offset-noise scale) see the same images, noise and dropout."""

    def __init__(self, seed: int):
        data, level, noise, drop, init, offset = np.random.SeedSequence(seed).spawn(6)
        self.data = np.random.default_rng(data)
        self.level = np.random.default_rng(level)
        self.noise = np.random.default_rng(noise)
        self.drop = np.random.default_rng(drop)
        self.init = np.random.default_rng(init)
        self.offset = np.random.default_rng(offset)


def _micro_batch(corpus: StyleCorpus, cfg: TrainConfig, streams: _Streams):
    idx = streams.data.integers(0, len(corpus), cfg.batch_size)
    x0 = corpus.images[idx]
    # one fresh noise level per item
    lam, _ = cfg.sampler.sample(streams.level, cfg.batch_size)
    eps = sample_noise(streams.noise, x0.shape, cfg.offset.scale, offset_rng=streams.offset)
    batch = NoisyBatch.build(x0, eps, lam=lam)
    cond = drop_condition(
        Cond(corpus.content_ids[idx], corpus.style_ids[idx]), streams.drop, cfg.p_drop, cfg.p_drop_style
    )
    return batch, cond


def accumulate_step(micro_grads: list[dict[str, np.ndarray]], params: dict[str, np.ndarray], state: AdamState, lr: float):
    """Average micro-batch gradients (summed in list order) and apply one Adam step."""
    if not micro_grads:
        raise ValueError("no micro-batch gradients to accumulate")
    if len(micro_grads) == 1:
        mean = micro_grads[0]
    else:
        mean = {}
        for name in micro_grads[0]:
            total = np.zeros(micro_grads[0][name].shape, dtype=np.float64)
            for g in micro_grads:
                total += g[name]
            mean[name] = total / len(micro_grads)
    # adam_step rejects non-finite gradients
    adam_step(params, mean, state, lr)
    return mean


def pretrain(
    corpus: StyleCorpus,
    arch: Architecture,
    cfg: TrainConfig,
    params: DenoiserParams | None = None,
    dtype=np.float32,
    log_every: int = 0,
) -> tuple[DenoiserParams, list[float]]:
    """Train every base parameter with the plain diffusion loss.

    Returns the trained parameters and one loss value per optimizer step.
    """
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    streams = _Streams(cfg.seed)
    if params is None:
        params = init_params(arch, streams.init, dtype)
    else:
        params = params.copy()
    state = AdamState()
    trace: list[float] = []
    for step in range(cfg.steps):
        losses, grads = [], []
        for _ in range(cfg.grad_accum):
            batch, cond = _micro_batch(corpus, cfg, streams)
            loss, g = dm_loss(params, batch, cond, wrt="base")
            losses.append(loss)
            grads.append(g)
        accumulate_step(grads, params.tensors, state, cfg.lr)
        trace.append(float(np.mean(losses)))
        if log_every and (step + 1) % log_every == 0:
            log.info("pretrain step %d loss %.5f", step + 1, np.mean(trace[-log_every:]))
    return params, trace


def finetune(
    pretrained: DenoiserParams,
    reference: StyleCorpus,
    cfg: TrainConfig,
    log_every: int = 0,
) -> tuple[LoraAdapter, list[float]]:
    """Fit a LoRA adapter to ``reference`` with the base weights frozen.

    ``cfg.objective == "dco"`` uses the frozen base as the reference model phi.
    """
    if cfg.lora is None:
        raise ValueError("fine-tuning needs cfg.lora")
    if len(reference) == 0:
        raise ValueError("empty reference set")
    streams = _Streams(cfg.seed)
    adapter = attach(pretrained, cfg.lora.targets, cfg.lora.rank, cfg.lora.alpha, rng=streams.init)
    trainable = trainable_parameters(adapter)
    dco = DcoConfig(cfg.beta_T)
    state = AdamState()
    trace: list[float] = []
    for step in range(cfg.steps):
        losses, grads = [], []
        for _ in range(cfg.grad_accum):
            batch, cond = _micro_batch(reference, cfg, streams)
            if cfg.objective == "dco":
                loss, g = dco_loss(pretrained, pretrained, batch, cond, dco, adapter=adapter, wrt="adapter")
            else:
                loss, g = dm_loss(pretrained, batch, cond, adapter=adapter, wrt="adapter")
            losses.append(loss)
            grads.append(g)
        accumulate_step(grads, trainable, state, cfg.lr)
        trace.append(float(np.mean(losses)))
        if not math.isfinite(trace[-1]):
            raise DivergenceError(f"loss went non-finite at step {step}: {trace[-5:]}")
        if log_every and (step + 1) % log_every == 0:
            log.info("finetune step %d loss %.5f", step + 1, np.mean(trace[-log_every:]))
    return adapter, trace
