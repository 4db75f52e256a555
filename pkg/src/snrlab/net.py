"""Conditional velocity-prediction MLP with a hand-written backward pass.

Layout (layer names are stable and used for LoRA targeting and checkpoints)::

    embed.table      (vocab, E)       content row | style row | null row
    embed.proj       2E -> P          followed by SiLU
    blocks.i.linear  ... -> hidden_i  followed by SiLU
    head             hidden -> C*H*W

The first block sees ``concat(flatten(x_t), time_features(t), silu(proj(cond)))``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.special import expit

from .errors import DivergenceError

NULL_ID = -1


@dataclass(frozen=True)
class Architecture:
    n_content: int
    n_style: int
    image_shape: tuple[int, int, int] = (3, 16, 16)
    hidden_widths: tuple[int, ...] = (256, 256)
    time_embed_dim: int = 32
    cond_embed_dim: int = 16
    cond_proj_dim: int = 32

    def __post_init__(self):
        object.__setattr__(self, "image_shape", tuple(int(d) for d in self.image_shape))
        object.__setattr__(self, "hidden_widths", tuple(int(d) for d in self.hidden_widths))
        dims = [self.n_content, self.n_style, self.time_embed_dim, self.cond_embed_dim, self.cond_proj_dim]
        if min(dims + list(self.image_shape)) < 1 or not self.hidden_widths or min(self.hidden_widths) < 1:
            raise ValueError(f"all architecture dims must be >= 1: {self}")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")
        if len(self.image_shape) != 3:
            raise ValueError("image_shape is (channels, height, width)")

    @property
    def input_dim(self) -> int:
        c, h, w = self.image_shape
        return c * h * w

    @property
    def cond_vocab(self) -> int:
        return self.n_content + self.n_style + 1

    @property
    def null_row(self) -> int:
        return self.cond_vocab - 1

    def linear_layers(self) -> list[tuple[str, int, int]]:
        """``(name, fan_in, fan_out)`` for every weight matrix, in forward order."""
        layers = [("embed.proj", 2 * self.cond_embed_dim, self.cond_proj_dim)]
        fan_in = self.input_dim + self.time_embed_dim + self.cond_proj_dim
        for i, width in enumerate(self.hidden_widths):
            layers.append((f"blocks.{i}.linear", fan_in, width))
            fan_in = width
        layers.append(("head", fan_in, self.input_dim))
        return layers

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {"embed.table": (self.cond_vocab, self.cond_embed_dim)}
        for name, fan_in, fan_out in self.linear_layers():
            shapes[f"{name}.weight"] = (fan_out, fan_in)
            shapes[f"{name}.bias"] = (fan_out,)
        return shapes

    def to_dict(self) -> dict:
        return {
            "n_content": self.n_content,
            "n_style": self.n_style,
            "image_shape": list(self.image_shape),
            "hidden_widths": list(self.hidden_widths),
            "time_embed_dim": self.time_embed_dim,
            "cond_embed_dim": self.cond_embed_dim,
            "cond_proj_dim": self.cond_proj_dim,
        }


@dataclass
class DenoiserParams:
    arch: Architecture
    tensors: dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    @property
    def dtype(self):
        return self.tensors["head.weight"].dtype

    def layer_names(self) -> list[str]:
        return [name for name, _, _ in self.arch.linear_layers()]

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(self.arch, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "DenoiserParams":
        return DenoiserParams(self.arch, {k: v.astype(dtype) for k, v in self.tensors.items()})


class Cond(NamedTuple):
    """Per-item condition ids; ``NULL_ID`` marks an absent slot."""

    content: np.ndarray
    style: np.ndarray

    @classmethod
    def of(cls, content, style, n: int | None = None) -> "Cond":
        c = np.atleast_1d(np.asarray(content, dtype=np.int64))
        s = np.atleast_1d(np.asarray(style, dtype=np.int64))
        if n is None:
            n = max(len(c), len(s))
        try:
            c = np.broadcast_to(c, (n,)).copy()
            s = np.broadcast_to(s, (n,)).copy()
        except ValueError:
            raise ValueError("content and style ids must have matching lengths") from None
        return cls(c, s)

    @classmethod
    def null(cls, n: int) -> "Cond":
        return cls.of(NULL_ID, NULL_ID, n)

    def __len__(self):
        return len(self.content)


def init_params(arch: Architecture, rng: np.random.Generator, dtype=np.float32) -> DenoiserParams:
    """He-normal weights, zero biases, N(0, 0.02^2) embedding rows."""
    tensors = {}
    for name, shape in arch.param_shapes().items():
        if name == "embed.table":
            arr = rng.normal(0.0, 0.02, shape)
        elif name.endswith(".weight"):
            arr = rng.normal(0.0, np.sqrt(2.0 / shape[1]), shape)
        else:
            arr = np.zeros(shape)
        tensors[name] = arr.astype(dtype)
    return DenoiserParams(arch, tensors)


def time_features(t, dim: int) -> np.ndarray:
    """Sin/cos features of t at ``dim/2`` geometric frequencies from 1 to 1e4.

    Returns shape ``(dim,)`` for scalar t, else ``(len(t), dim)``.
    """
    if dim % 2:
        raise ValueError("time feature dim must be even")
    freqs = np.logspace(0.0, 4.0, dim // 2)
    tt = np.asarray(t, dtype=np.float64)
    ang = tt[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def _silu(x):
    return x * expit(x)


def _silu_grad(x):
    s = expit(x)
    return s * (1.0 + x * (1.0 - s))


def _cond_rows(arch: Architecture, cond: Cond) -> tuple[np.ndarray, np.ndarray]:
    c, s = np.asarray(cond.content), np.asarray(cond.style)
    bad_c = (c != NULL_ID) & ((c < 0) | (c >= arch.n_content))
    bad_s = (s != NULL_ID) & ((s < 0) | (s >= arch.n_style))
    if bad_c.any() or bad_s.any():
        raise ValueError(f"condition ids out of range: content={c[bad_c]}, style={s[bad_s]}")
    crow = np.where(c == NULL_ID, arch.null_row, c)
    srow = np.where(s == NULL_ID, arch.null_row, arch.n_content + s)
    return crow, srow


@dataclass
class ForwardCache:
    crow: np.ndarray
    srow: np.ndarray
    # input to each linear layer, and its pre-activation output (for SiLU)
    inputs: dict[str, np.ndarray] = field(default_factory=dict)
    preacts: dict[str, np.ndarray] = field(default_factory=dict)
    batch_shape: tuple = ()


def _linear(params: DenoiserParams, name: str, h: np.ndarray, adapter) -> np.ndarray:
    y = h @ params[f"{name}.weight"].T + params[f"{name}.bias"]
    if adapter is not None and name in adapter.pairs:
        a, b = adapter.pairs[name]
        y = y + adapter.scale * ((h @ a.T) @ b.T)
    return y


def forward(params: DenoiserParams, x_t, t, cond: Cond, adapter=None, return_cache: bool = False):
    """Predict velocity for a batch ``x_t`` of shape ``(B, C, H, W)``.

    ``t`` is a scalar or per-item array. With an adapter attached, targeted
    layers compute ``W h + (alpha / r) B (A h)``.
    """
    arch = params.arch
    dtype = params.dtype
    x = np.asarray(x_t, dtype=dtype)
    batch_shape = x.shape
    n = batch_shape[0]
    if batch_shape[1:] != arch.image_shape:
        raise ValueError(f"expected images of shape {arch.image_shape}, got {batch_shape[1:]}")
    if len(cond) != n:
        raise ValueError("condition length does not match batch")
    tt = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
    crow, srow = _cond_rows(arch, cond)
    cache = ForwardCache(crow, srow, batch_shape=batch_shape)

    table = params["embed.table"]
    e = np.concatenate([table[crow], table[srow]], axis=1)
    cache.inputs["embed.proj"] = e
    pc = _linear(params, "embed.proj", e, adapter)
    cache.preacts["embed.proj"] = pc

    h = np.concatenate(
        [x.reshape(n, -1), time_features(tt, arch.time_embed_dim).astype(dtype), _silu(pc)], axis=1
    )
    for i in range(len(arch.hidden_widths)):
        name = f"blocks.{i}.linear"
        cache.inputs[name] = h
        a = _linear(params, name, h, adapter)
        cache.preacts[name] = a
        h = _silu(a)
    cache.inputs["head"] = h
    out = _linear(params, "head", h, adapter).reshape(batch_shape)
    return (out, cache) if return_cache else out


def _linear_backward(params, name, h, g, adapter, grads, want_base, want_adapter):
    w = params[f"{name}.weight"]
    if want_base:
        grads[f"{name}.weight"] = g.T @ h
        grads[f"{name}.bias"] = g.sum(axis=0)
    gh = g @ w
    if adapter is not None and name in adapter.pairs:
        a, b = adapter.pairs[name]
        gb = g @ b  # (n, r)
        if want_adapter:
            grads[f"{name}.lora_A"] = adapter.scale * (gb.T @ h)
            grads[f"{name}.lora_B"] = adapter.scale * (g.T @ (h @ a.T))
        gh = gh + adapter.scale * (gb @ a)
    return gh


def backward(
    params: DenoiserParams,
    cache: ForwardCache | None,
    grad_out,
    adapter=None,
    wrt: str = "base",
) -> dict[str, np.ndarray]:
    """Gradients of ``sum(grad_out * out)`` w.r.t. the parameters.

    ``wrt`` is ``"base"``, ``"adapter"`` or ``"both"``. Adapter gradients use
    keys ``"<layer>.lora_A"`` and ``"<layer>.lora_B"``.
    """
    if cache is None:
        raise ValueError("backward needs the cache from forward(..., return_cache=True)")
    if wrt not in ("base", "adapter", "both"):
        raise ValueError(f"bad wrt {wrt!r}")
    want_base = wrt in ("base", "both")
    want_adapter = wrt in ("adapter", "both")
    if want_adapter and adapter is None:
        raise ValueError("adapter gradients requested without an adapter")
    arch = params.arch
    n = cache.batch_shape[0]
    grads: dict[str, np.ndarray] = {}

    g = np.asarray(grad_out, dtype=params.dtype).reshape(n, -1)
    g = _linear_backward(params, "head", cache.inputs["head"], g, adapter, grads, want_base, want_adapter)
    for i in reversed(range(len(arch.hidden_widths))):
        name = f"blocks.{i}.linear"
        g = g * _silu_grad(cache.preacts[name])
        g = _linear_backward(params, name, cache.inputs[name], g, adapter, grads, want_base, want_adapter)

    # g is now the gradient w.r.t. concat(x, time features, silu(proj)).
    g_pc = g[:, arch.input_dim + arch.time_embed_dim :] * _silu_grad(cache.preacts["embed.proj"])
    g_e = _linear_backward(
        params, "embed.proj", cache.inputs["embed.proj"], g_pc, adapter, grads, want_base, want_adapter
    )
    if want_base:
        gt = np.zeros_like(params["embed.table"])
        e_dim = arch.cond_embed_dim
        np.add.at(gt, cache.crow, g_e[:, :e_dim])
        np.add.at(gt, cache.srow, g_e[:, e_dim:])
        grads["embed.table"] = gt
    return grads


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, lr: float = 1e-4):
    """Bias-corrected Adam, applied in place to ``params[name]`` for each name in ``grads``.

    Returns ``(params, state)`` for convenience.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {name!r}")
        if params[name].shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {name!r} {params[name].shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.items():
        p = params[name]
        g = g.astype(p.dtype, copy=False)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        denom = np.sqrt(v / c2)
        denom += state.eps
        p -= (lr / c1) * m / denom
    return params, state


def drop_condition(cond: Cond, rng: np.random.Generator, p_drop: float = 0.1, p_drop_style: float = 0.0) -> Cond:
    """Null both ids with probability ``p_drop``.

    ``p_drop_style`` additionally nulls just the style slot, which trains the
    content-only ("style-free") branch used by condition switching.
    """
    if not (0.0 <= p_drop <= 1.0 and 0.0 <= p_drop_style <= 1.0):
        raise ValueError("drop probabilities must lie in [0, 1]")
    n = len(cond)
    both = rng.random(n) < p_drop
    content = np.where(both, NULL_ID, cond.content)
    style = np.where(both, NULL_ID, cond.style)
    if p_drop_style > 0.0:
        style = np.where(rng.random(n) < p_drop_style, NULL_ID, style)
    return Cond(content, style)
