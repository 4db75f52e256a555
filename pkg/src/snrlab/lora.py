"""Low-rank adapters attached to named weight matrices of the denoiser."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .net import DenoiserParams, forward

# Every hidden block plus the condition projection. "head" can be added by config.
DEFAULT_TARGETS = ("embed.proj", "blocks.0.linear", "blocks.1.linear")

# Named subsets, the toy analogue of image-stream-only vs both-stream targeting.
TARGET_PRESETS = {
    "default": DEFAULT_TARGETS,
    "no_cond_path": ("blocks.0.linear", "blocks.1.linear"),
    "all": ("embed.proj", "blocks.0.linear", "blocks.1.linear", "head"),
}


@dataclass
class LoraAdapter:
    """``pairs[name] = (A, B)`` with A of shape (r, fan_in) and B of shape (fan_out, r)."""

    pairs: dict[str, tuple[np.ndarray, np.ndarray]]
    rank: int
    alpha: float

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @property
    def targets(self) -> list[str]:
        return list(self.pairs)

    def copy(self) -> "LoraAdapter":
        return LoraAdapter({k: (a.copy(), b.copy()) for k, (a, b) in self.pairs.items()}, self.rank, self.alpha)


def resolve_targets(params: DenoiserParams, targets) -> list[str]:
    if isinstance(targets, str):
        if targets not in TARGET_PRESETS:
            raise ValueError(f"unknown target preset {targets!r}")
        targets = TARGET_PRESETS[targets]
    targets = list(targets)
    names = params.layer_names()
    # Hidden blocks beyond the default two are included when the net is deeper.
    unknown = [t for t in targets if t not in names]
    if unknown:
        raise KeyError(f"unknown LoRA target layer(s) {unknown}; available: {names}")
    if len(set(targets)) != len(targets):
        raise ValueError("duplicate LoRA targets")
    return targets


def attach(
    params: DenoiserParams,
    targets=DEFAULT_TARGETS,
    rank: int = 32,
    alpha: float | None = None,
    rng: np.random.Generator | None = None,
    a_std: float = 0.02,
) -> LoraAdapter:
    """Create an adapter for ``targets``. A ~ N(0, a_std^2), B = 0, alpha defaults to rank.

    The base parameters are not touched.
    """
    if rank < 1:
        raise ValueError("rank must be >= 1")
    if rng is None:
        rng = np.random.default_rng(0)
    names = resolve_targets(params, targets)
    alpha = float(rank if alpha is None else alpha)
    pairs = {}
    for name in names:
        fan_out, fan_in = params[f"{name}.weight"].shape
        a = rng.normal(0.0, a_std, (rank, fan_in)).astype(params.dtype)
        b = np.zeros((fan_out, rank), dtype=params.dtype)
        pairs[name] = (a, b)
    return LoraAdapter(pairs, rank, alpha)


def adapted_forward(params: DenoiserParams, adapter: LoraAdapter, x_t, t, cond):
    return forward(params, x_t, t, cond, adapter=adapter)


def merge(params: DenoiserParams, adapter: LoraAdapter) -> DenoiserParams:
    """Fold ``(alpha / r) B A`` into each targeted weight; returns new params.

    Not idempotent: merging the same adapter twice adds the update twice.
    """
    merged = params.copy()
    for name, (a, b) in adapter.pairs.items():
        w = merged.tensors[f"{name}.weight"]
        w += (adapter.scale * (b.astype(np.float64) @ a.astype(np.float64))).astype(w.dtype)
    return merged


def trainable_parameters(adapter: LoraAdapter) -> dict[str, np.ndarray]:
    """The live A and B arrays, keyed ``"<layer>.lora_A"`` / ``"<layer>.lora_B"``.

    Updating these arrays in place updates the adapter.
    """
    out = {}
    for name, (a, b) in adapter.pairs.items():
        out[f"{name}.lora_A"] = a
        out[f"{name}.lora_B"] = b
    return out


def parameter_count(adapter: LoraAdapter) -> int:
    return sum(a.size + b.size for a, b in adapter.pairs.values())
