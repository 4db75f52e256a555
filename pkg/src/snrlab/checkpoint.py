"""Binary ``.snrf`` checkpoints for base parameters and LoRA adapters.

Layout::

    b"SNRF" | u32 LE version | u32 LE header length | JSON header | tensors

Tensors are raw little-endian float32 arrays, concatenated in the order the
header lists them. The header carries the architecture, tensor names and
shapes, the seed and an echo of the run config.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointFormatError
from .lora import LoraAdapter
from .net import Architecture, DenoiserParams

MAGIC = b"SNRF"
VERSION = 1
_PREFIX = struct.Struct("<4sII")
_DTYPE = np.dtype("<f4")


@dataclass
class Checkpoint:
    kind: str
    architecture: Architecture
    tensors: dict[str, np.ndarray]
    seed: int | None = None
    config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def _arch_from_dict(d: dict) -> Architecture:
    try:
        return Architecture(**d)
    except TypeError as e:
        raise CheckpointFormatError(f"bad architecture in header: {e}") from None


def encode(ckpt: Checkpoint) -> bytes:
    header = {
        "kind": ckpt.kind,
        "architecture": ckpt.architecture.to_dict(),
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in ckpt.tensors.items()],
        "seed": ckpt.seed,
        "config": ckpt.config,
        **ckpt.extra,
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join(np.ascontiguousarray(v, dtype=_DTYPE).tobytes() for v in ckpt.tensors.values())
    return _PREFIX.pack(MAGIC, VERSION, len(raw)) + raw + body


def decode(data: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(data) < _PREFIX.size:
        raise CheckpointFormatError(f"{source}: truncated file ({len(data)} bytes)")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointFormatError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CheckpointFormatError(f"{source}: unsupported format version {version} (this build reads {VERSION})")
    start = _PREFIX.size + hlen
    if start > len(data):
        raise CheckpointFormatError(f"{source}: header length {hlen} runs past end of file")
    try:
        header = json.loads(data[_PREFIX.size : start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"{source}: unreadable header: {e}") from None
    entries = header.pop("tensors", None)
    if not isinstance(entries, list):
        raise CheckpointFormatError(f"{source}: header has no tensor table")
    declared = sum(int(np.prod(e["shape"], dtype=np.int64)) for e in entries) * _DTYPE.itemsize
    if declared != len(data) - start:
        raise CheckpointFormatError(f"{source}: header declares {declared} payload bytes, file has {len(data) - start}")
    tensors = {}
    offset = start
    for e in entries:
        shape = tuple(int(d) for d in e["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(data, dtype=_DTYPE, count=count, offset=offset).reshape(shape)
        tensors[e["name"]] = arr.astype(np.float32)
        offset += count * _DTYPE.itemsize
    kind = header.pop("kind", None)
    arch = _arch_from_dict(header.pop("architecture", {}))
    seed = header.pop("seed", None)
    config = header.pop("config", {}) or {}
    return Checkpoint(kind, arch, tensors, seed, config, header)


def save(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(ckpt))
    return path


def load(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return decode(path.read_bytes(), str(path))


def _check_shapes(found: dict[str, np.ndarray], expected: dict[str, tuple], source: str):
    missing = [k for k in expected if k not in found]
    extra = [k for k in found if k not in expected]
    if missing or extra:
        raise CheckpointFormatError(f"{source}: tensor set mismatch; missing {missing}, unexpected {extra}")
    for name, shape in expected.items():
        if tuple(found[name].shape) != tuple(shape):
            raise CheckpointFormatError(
                f"{source}: layer {name!r} has shape {tuple(found[name].shape)}, architecture expects {tuple(shape)}"
            )


def save_params(path, params: DenoiserParams, seed=None, config=None) -> Path:
    return save(path, Checkpoint("base", params.arch, dict(params.tensors), seed, config or {}))


def load_params(path, arch: Architecture | None = None) -> tuple[DenoiserParams, Checkpoint]:
    """Load a base checkpoint, optionally checking it against a configured architecture."""
    ckpt = load(path)
    if ckpt.kind != "base":
        raise CheckpointFormatError(f"{path}: expected a base checkpoint, found kind {ckpt.kind!r}")
    target = arch or ckpt.architecture
    _check_shapes(ckpt.tensors, target.param_shapes(), str(path))
    return DenoiserParams(target, ckpt.tensors), ckpt


def save_adapter(path, adapter: LoraAdapter, arch: Architecture, seed=None, config=None) -> Path:
    tensors = {}
    for name, (a, b) in adapter.pairs.items():
        tensors[f"{name}.lora_A"] = a
        tensors[f"{name}.lora_B"] = b
    extra = {"rank": adapter.rank, "alpha": adapter.alpha, "targets": adapter.targets}
    return save(path, Checkpoint("adapter", arch, tensors, seed, config or {}, extra))


def load_adapter(path, params: DenoiserParams | None = None) -> tuple[LoraAdapter, Checkpoint]:
    """Load an adapter; with ``params`` given, check it fits that base network."""
    ckpt = load(path)
    if ckpt.kind != "adapter":
        raise CheckpointFormatError(f"{path}: expected an adapter checkpoint, found kind {ckpt.kind!r}")
    rank, alpha, targets = ckpt.extra.get("rank"), ckpt.extra.get("alpha"), ckpt.extra.get("targets")
    if rank is None or alpha is None or targets is None:
        raise CheckpointFormatError(f"{path}: adapter header lacks rank/alpha/targets")
    base = params.arch if params is not None else ckpt.architecture
    fans = {name: (fi, fo) for name, fi, fo in base.linear_layers()}
    expected = {}
    for name in targets:
        if name not in fans:
            raise CheckpointFormatError(f"{path}: adapter targets layer {name!r}, which the architecture lacks")
        fi, fo = fans[name]
        expected[f"{name}.lora_A"] = (rank, fi)
        expected[f"{name}.lora_B"] = (fo, rank)
    _check_shapes(ckpt.tensors, expected, str(path))
    pairs = {name: (ckpt.tensors[f"{name}.lora_A"], ckpt.tensors[f"{name}.lora_B"]) for name in targets}
    return LoraAdapter(pairs, int(rank), float(alpha)), ckpt
