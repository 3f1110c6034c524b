"""Binary tensor container.

Layout (all integers little-endian)::

    b"ALNW" | u32 version | u32 entry count
    per entry: u16 name length | UTF-8 name | u8 rank | rank x u32 dims | float32 values
    u32 metadata length | UTF-8 JSON metadata
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .network import LayerGraph, NetworkConfig, build
from .pipeline import DatasetStats
from .tensor import Tensor
from .training import Adam

MAGIC = b"ALNW"
VERSION = 1


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


def write_container(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    chunks.append(struct.pack("<I", len(blob)) + blob)
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(f"{self.path}: truncated at byte {self.pos} (needed {n} more)")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_container(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    r = _Reader(data, path)
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint (bad magic {data[:4]!r})")
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {VERSION}")
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I") if rank else ()
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
        tensors[name] = arr
    (n,) = r.unpack("<I")
    meta = json.loads(r.take(n).decode("utf-8"))
    if r.pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - r.pos} trailing bytes")
    return tensors, meta


@dataclass
class Checkpoint:
    config: NetworkConfig
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    stats: DatasetStats | None = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_training(cls, graph: LayerGraph, opt: Adam | None, stats: DatasetStats | None, extra: dict | None = None):
        return cls(
            graph.config,
            {k: p.data.astype(np.float32) for k, p in graph.params.items()},
            {k: v.astype(np.float32) for k, v in (opt.m if opt else {}).items()},
            {k: v.astype(np.float32) for k, v in (opt.v if opt else {}).items()},
            opt.step_count if opt else 0,
            stats,
            dict(extra or {}),
        )

    def graph(self) -> LayerGraph:
        g = build(self.config, seed=0, dtype=np.float32)
        if set(g.params) != set(self.params):
            raise CheckpointError("checkpoint parameters do not match the network configuration")
        for k, arr in self.params.items():
            if g.params[k].shape != arr.shape:
                raise CheckpointError(f"parameter {k}: shape {arr.shape} vs expected {g.params[k].shape}")
            g.params[k] = Tensor(arr.copy(), requires_grad=True, name=k)
        return g

    def optimizer(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> Adam:
        return Adam(lr, beta1, beta2, eps, self.step, {k: v.copy() for k, v in self.adam_m.items()}, {k: v.copy() for k, v in self.adam_v.items()})


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    tensors = {f"param/{k}": v for k, v in ckpt.params.items()}
    tensors.update({f"adam_m/{k}": v for k, v in ckpt.adam_m.items()})
    tensors.update({f"adam_v/{k}": v for k, v in ckpt.adam_v.items()})
    meta = {
        "network": ckpt.config.to_dict(),
        "step": ckpt.step,
        "stats": None if ckpt.stats is None else {"mean": list(ckpt.stats.mean), "class_counts": list(ckpt.stats.class_counts)},
        "extra": ckpt.extra,
    }
    write_container(path, tensors, meta)


def load_checkpoint(path) -> Checkpoint:
    tensors, meta = read_container(path)
    try:
        config = NetworkConfig.from_dict(meta["network"])
        stats = meta.get("stats")
        stats = None if stats is None else DatasetStats(tuple(stats["mean"]), tuple(stats["class_counts"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed metadata block: {exc}") from exc
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for name, arr in tensors.items():
        prefix, _, key = name.partition("/")
        if prefix not in groups:
            raise CheckpointError(f"{path}: unknown entry {name!r}")
        groups[prefix][key] = arr
    return Checkpoint(config, groups["param"], groups["adam_m"], groups["adam_v"], int(meta.get("step", 0)), stats, meta.get("extra", {}))
