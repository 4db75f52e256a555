"""Toy-scale presets and the experiment drivers shared by the CLI and the acceptance tests."""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .diffusion import OffsetNoiseConfig
from .generate import GenerationConfig, SwitchPlan, euler_sample, switched_sample
from .lora import LoraAdapter
from .net import NULL_ID, Architecture, Cond, DenoiserParams
from .samplers import LogitNormal, SnrSampler
from .styledata import CONTENTS, HELD_OUT_STYLE, STYLES, StyleCorpus, content_score, gen_corpus, style_score
from .train import LoraConfig, TrainConfig, finetune, pretrain

TOY_ARCH = Architecture(n_content=4, n_style=6)

# 10k steps of batch 32 take about a minute and a half on one core.
TOY_PRETRAIN = TrainConfig(
    sampler=LogitNormal(),
    steps=10_000,
    lr=1e-3,
    grad_accum=1,
    batch_size=32,
    p_drop=0.1,
    p_drop_style=0.1,
    seed=0,
)

# The 300-step, batch 1 x 4 accumulation recipe; the lr is raised for the tiny net.
TOY_FINETUNE = TrainConfig(
    sampler=LogitNormal(),
    steps=300,
    lr=3e-3,
    grad_accum=4,
    batch_size=1,
    lora=LoraConfig(rank=32),
    seed=0,
)

# 768-dim images: the resolution-matched shift is ~0.17 and guidance 7 oversaturates.
TOY_GENERATION = GenerationConfig(steps=28, guidance_scale=3.0, shift=0.17, seed=0)


def toy_corpus(per_pair: int = 8, seed: int = 0, held_out=(HELD_OUT_STYLE,)) -> StyleCorpus:
    """The pre-training corpus: every (content, style) pair except held-out styles."""
    return gen_corpus(4, 6, per_pair, seed=seed, held_out=held_out).training_split()


def reference_set(style_id: int = HELD_OUT_STYLE, per_pair: int = 2, seed: int = 7) -> StyleCorpus:
    """A few renders of one style (all contents), drawn apart from the training corpus."""
    return gen_corpus(4, 6, per_pair, seed=seed).style_split(style_id)


def pretrain_toy(cfg: TrainConfig = TOY_PRETRAIN, arch: Architecture = TOY_ARCH, corpus: StyleCorpus | None = None):
    return pretrain(toy_corpus() if corpus is None else corpus, arch, cfg)


def grid_conditions(contents, style, per_content: int) -> Cond:
    """``per_content`` rows for each content id, all with the same style slot."""
    return Cond.of(np.repeat(np.asarray(contents, dtype=np.int64), per_content), style)


def mean_content_score(samples, cond: Cond) -> float:
    scores = [content_score(samples[cond.content == c], CONTENTS[c]) for c in np.unique(cond.content)]
    return float(np.mean(scores))


@dataclass
class SampleResult:
    images: np.ndarray
    cond: Cond
    style_score: float
    content_score: float


def sample_and_score(
    params: DenoiserParams,
    style_id: int,
    gen: GenerationConfig = TOY_GENERATION,
    adapter: LoraAdapter | None = None,
    per_content: int = 16,
    contents=(0, 1, 2, 3),
) -> SampleResult:
    cond = grid_conditions(contents, style_id, per_content)
    x = euler_sample(params, cond, gen, adapter=adapter)
    return SampleResult(x, cond, style_score(x, STYLES[style_id]), mean_content_score(x, cond))


def switch_grid(
    params: DenoiserParams,
    style_id: int,
    fractions=(0.0, 0.1, 1.0),
    gen: GenerationConfig = TOY_GENERATION,
    per_content: int = 16,
    adapter: LoraAdapter | None = None,
) -> dict[float, SampleResult]:
    """Style slot empty for the first ``ceil(f * steps)`` steps, then set.

    f = 0 is plain style-conditioned sampling, f = 1 never sees the style.
    All fractions share the initial noise.
    """
    late = grid_conditions((0, 1, 2, 3), style_id, per_content)
    early = Cond(late.content, np.full(len(late), NULL_ID))
    out = {}
    for f in fractions:
        x = switched_sample(params, SwitchPlan(early, late, float(f)), gen, adapter=adapter)
        out[float(f)] = SampleResult(x, late, style_score(x, STYLES[style_id]), mean_content_score(x, late))
    return out


@dataclass
class FinetuneResult:
    adapter: LoraAdapter
    trace: list[float]
    style_score: float
    content_score: float
    seed: int
    wall_time: float


def finetune_and_score(
    params: DenoiserParams,
    sampler: SnrSampler,
    seed: int,
    rank: int = 32,
    offset_noise: float = 0.0,
    style_id: int = HELD_OUT_STYLE,
    base_cfg: TrainConfig = TOY_FINETUNE,
    gen: GenerationConfig = TOY_GENERATION,
    per_content: int = 16,
    reference: StyleCorpus | None = None,
) -> FinetuneResult:
    """Fit a LoRA adapter to one style with ``sampler`` and score fresh samples.

    Runs with the same ``seed`` share images, noise, dropout and the sampling
    noise, so they differ only through the training noise levels.
    """
    start = time.perf_counter()
    ref = reference_set(style_id) if reference is None else reference
    lora = replace(base_cfg.lora or LoraConfig(), rank=rank)
    cfg = replace(base_cfg, sampler=sampler, lora=lora, offset=OffsetNoiseConfig(offset_noise), seed=seed)
    adapter, trace = finetune(params, ref, cfg)
    res = sample_and_score(params, style_id, replace(gen, seed=gen.seed + seed), adapter, per_content)
    return FinetuneResult(adapter, trace, res.style_score, res.content_score, seed, time.perf_counter() - start)
