"""GPNW checkpoint container.

Layout, little-endian throughout::

    b"GPNW"  u32 version
    u32 len  utf-8 descriptor
    u32 n_tensors
    per tensor: u16 name_len, name, u8 ndim, u32[ndim] dims, f32[prod(dims)] data

The descriptor is the canonical architecture string, then a newline, then a
JSON object holding the neuron configuration and training metadata.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .neurons import NeuronConfig, NeuronKind

MAGIC = b"GPNW"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class CheckpointBundle:
    arch: str
    tensors: dict[str, np.ndarray]
    neuron: dict = field(default_factory=dict)
    seed: int = 0
    epoch: int = 0
    val_acc: float = float("nan")
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_network(cls, net, epoch: int = 0, val_acc: float = float("nan"), **extra):
        cfg = net.neuron_cfg
        neuron = {
            "kind": cfg.kind.value,
            "beta": cfg.beta,
            "alpha": cfg.alpha,
            "v_th": cfg.v_th,
            "ablation": sorted(cfg.ablation),
            "detach_reset": cfg.detach_reset,
            "dropout": _dropout_rate(net),
            "in_channels": net.in_channels,
        }
        tensors = {k: v.astype(np.float32) for k, v in net.state_arrays().items()}
        return cls(net.arch, tensors, neuron, net.seed, epoch, val_acc, dict(extra))

    def neuron_config(self) -> NeuronConfig:
        n = self.neuron
        return NeuronConfig(
            kind=NeuronKind(n.get("kind", "LIF")), beta=n.get("beta"),
            alpha=n.get("alpha", 0.5), v_th=n.get("v_th"),
            ablation=frozenset(n.get("ablation", ())),
            detach_reset=n.get("detach_reset", True))

    def to_network(self):
        from .network import DEFAULT_DROPOUT, Network

        in_channels = self.neuron.get("in_channels")
        if in_channels is None:
            first = next(iter(self.tensors.values()))
            in_channels = first.shape[1]
        net = Network(self.arch, in_channels, self.neuron_config(), seed=self.seed,
                      dropout=self.neuron.get("dropout", DEFAULT_DROPOUT))
        net.load_arrays({k: v.astype(np.float64) for k, v in self.tensors.items()})
        return net

    # -- bytes ---------------------------------------------------------------

    def descriptor(self) -> str:
        meta = {"neuron": self.neuron, "seed": self.seed, "epoch": self.epoch,
                "val_acc": self.val_acc, "extra": self.extra}
        return self.arch + "\n" + json.dumps(meta, sort_keys=True)

    def to_bytes(self) -> bytes:
        desc = self.descriptor().encode("utf-8")
        parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(desc)), desc,
                 struct.pack("<I", len(self.tensors))]
        for name, arr in self.tensors.items():
            raw = name.encode("utf-8")
            arr = np.asarray(arr, dtype="<f4")
            parts.append(struct.pack("<H", len(raw)) + raw)
            parts.append(struct.pack("<B", arr.ndim))
            parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            parts.append(arr.tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "CheckpointBundle":
        reader = _Reader(buf)
        if reader.take(4) != MAGIC:
            raise CheckpointError("bad magic: not a GPNW checkpoint")
        version, = reader.unpack("<I")
        if version != VERSION:
            raise CheckpointError(f"unsupported GPNW version {version}")
        n_desc, = reader.unpack("<I")
        desc = reader.take(n_desc).decode("utf-8")
        arch, _, meta_text = desc.partition("\n")
        meta = json.loads(meta_text) if meta_text else {}
        n_tensors, = reader.unpack("<I")
        tensors = {}
        for _ in range(n_tensors):
            n_name, = reader.unpack("<H")
            name = reader.take(n_name).decode("utf-8")
            ndim, = reader.unpack("<B")
            dims = reader.unpack(f"<{ndim}I") if ndim else ()
            count = int(np.prod(dims)) if ndim else 1
            data = np.frombuffer(reader.take(4 * count), dtype="<f4").reshape(dims)
            tensors[name] = data.copy()
        if reader.off != len(buf):
            raise CheckpointError("trailing bytes after last tensor")
        return cls(arch, tensors, meta.get("neuron", {}), meta.get("seed", 0),
                   meta.get("epoch", 0), meta.get("val_acc", float("nan")), meta.get("extra", {}))

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "CheckpointBundle":
        return cls.from_bytes(Path(path).read_bytes())


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _dropout_rate(net) -> float:
    from .network import DEFAULT_DROPOUT

    rates = [l.rate for l in net.layers_spec if l.kind == "DP"]
    return rates[0] if rates else DEFAULT_DROPOUT
