"""Spike-event audio ingestion: SPKE container I/O, binning, augmentation, splits.

SPKE layout (little-endian)::

    b"SPKE"  u32 version=1  u32 num_sequences  u16 channel_count
    per sequence:
        u16 label  u32 n_events  f64[n_events] times  u16[n_events] units
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

MAGIC = b"SPKE"
VERSION = 1
MAX_ROLL = 15
WINDOW = 1.0

_HEADER = struct.Struct("<4sIIH")
_SEQ_HEADER = struct.Struct("<HI")


class FormatError(ValueError):
    """Malformed SPKE data."""


@dataclass
class SpikeEventSequence:
    times: np.ndarray
    units: np.ndarray
    label: int
    channels: int = 700

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype="<f8").reshape(-1)
        self.units = np.asarray(self.units, dtype="<u2").reshape(-1)
        self.validate()

    def validate(self):
        if self.times.shape != self.units.shape:
            raise FormatError("times and units differ in length")
        if self.times.size:
            if not np.all(np.isfinite(self.times)) or self.times.min() < 0:
                raise FormatError("event times must be finite and non-negative")
            if np.any(np.diff(self.times) < 0):
                raise FormatError("event times are not sorted")
            if int(self.units.max()) >= self.channels:
                raise FormatError(f"unit {int(self.units.max())} >= channel count {self.channels}")
        if not 0 <= self.label < 2**16:
            raise FormatError(f"label {self.label} does not fit in u16")

    def __len__(self):
        return int(self.times.size)


@dataclass
class BinnedSpikeTensor:
    counts: np.ndarray  # (T, C) integer counts
    label: int
    dropped: int = 0  # events at or beyond the window end

    @property
    def steps(self) -> int:
        return self.counts.shape[0]


@dataclass
class DatasetSplit:
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    seed: int = 0


# ---------------------------------------------------------------------------
# SPKE I/O


def serialize_events(sequences: Sequence[SpikeEventSequence], channels: int | None = None) -> bytes:
    if channels is None:
        channels = sequences[0].channels if sequences else 700
    parts = [_HEADER.pack(MAGIC, VERSION, len(sequences), channels)]
    for seq in sequences:
        if seq.channels != channels:
            raise FormatError("all sequences in a container share one channel count")
        parts.append(_SEQ_HEADER.pack(seq.label, len(seq)))
        parts.append(seq.times.astype("<f8").tobytes())
        parts.append(seq.units.astype("<u2").tobytes())
    return b"".join(parts)


def parse_events(buf: bytes) -> tuple[list[SpikeEventSequence], int]:
    """Decode an SPKE buffer into (sequences, channel_count)."""
    if len(buf) < _HEADER.size:
        raise FormatError("truncated SPKE header")
    magic, version, count, channels = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported SPKE version {version}")
    off = _HEADER.size
    out = []
    for k in range(count):
        if off + _SEQ_HEADER.size > len(buf):
            raise FormatError(f"truncated file in header of sequence {k}")
        label, n = _SEQ_HEADER.unpack_from(buf, off)
        off += _SEQ_HEADER.size
        need = n * 10
        if off + need > len(buf):
            raise FormatError(f"truncated file in events of sequence {k}")
        times = np.frombuffer(buf, dtype="<f8", count=n, offset=off)
        units = np.frombuffer(buf, dtype="<u2", count=n, offset=off + 8 * n)
        off += need
        out.append(SpikeEventSequence(times.copy(), units.copy(), label, channels))
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes after last sequence")
    return out, channels


def load_events(path) -> list[SpikeEventSequence]:
    seqs, _ = parse_events(Path(path).read_bytes())
    return seqs


def save_events(path, sequences: Sequence[SpikeEventSequence], channels: int | None = None):
    Path(path).write_bytes(serialize_events(sequences, channels))


def channel_count(path) -> int:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
    if len(head) < _HEADER.size or head[:4] != MAGIC:
        raise FormatError(f"{path}: not an SPKE file")
    return _HEADER.unpack(head)[3]


# ---------------------------------------------------------------------------
# transforms


def bin_sequence(seq: SpikeEventSequence, steps: int, window: float = WINDOW) -> BinnedSpikeTensor:
    """Count events into ``steps`` equal bins over ``[0, window)``."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    keep = seq.times < window
    idx = np.floor(seq.times[keep] * (steps / window)).astype(np.int64)
    # guard against t*steps rounding up to `steps` for t just below the window end
    np.minimum(idx, steps - 1, out=idx)
    counts = np.zeros((steps, seq.channels), dtype=np.int64)
    np.add.at(counts, (idx, seq.units[keep].astype(np.int64)), 1)
    return BinnedSpikeTensor(counts, seq.label, dropped=int((~keep).sum()))


def bin_all(sequences: Sequence[SpikeEventSequence], steps: int,
            window: float = WINDOW) -> tuple[np.ndarray, np.ndarray]:
    """Stack binned sequences into ``(N, T, C)`` counts and ``(N,)`` labels.

    Counts are kept as u16 to bound memory on full corpora; batches are
    converted to float64 on the way into the network.
    """
    if not sequences:
        return np.zeros((0, steps, 0), dtype=np.uint16), np.zeros(0, dtype=np.int64)
    x = np.zeros((len(sequences), steps, sequences[0].channels), dtype=np.uint16)
    for k, s in enumerate(sequences):
        counts = bin_sequence(s, steps, window).counts
        if counts.max(initial=0) > np.iinfo(np.uint16).max:
            raise OverflowError(f"sequence {k}: bin count exceeds u16")
        x[k] = counts
    y = np.array([s.label for s in sequences], dtype=np.int64)
    return x, y


def sample_rng(seed: int, index: int, epoch: int) -> np.random.Generator:
    """Per-sample generator, independent of processing order."""
    return np.random.default_rng(np.random.SeedSequence([seed, index, epoch]))


def roll_offsets(rng: np.random.Generator, steps: int, granularity: str = "per_step") -> np.ndarray:
    if granularity == "per_step":
        return rng.integers(0, MAX_ROLL + 1, size=steps)
    if granularity == "per_sample":
        return np.full(steps, rng.integers(0, MAX_ROLL + 1))
    raise ValueError(f"unknown roll granularity {granularity!r}")


def roll_channels(counts: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Cyclically shift each time step's channel axis: ``c -> (c + k) mod C``."""
    steps, channels = counts.shape
    src = (np.arange(channels)[None, :] - np.asarray(offsets)[:, None]) % channels
    return np.take_along_axis(counts, src, axis=1)


def augment_roll(x: BinnedSpikeTensor, rng: np.random.Generator,
                 granularity: str = "per_step") -> BinnedSpikeTensor:
    offsets = roll_offsets(rng, x.steps, granularity)
    return BinnedSpikeTensor(roll_channels(x.counts, offsets), x.label, x.dropped)


def split_train_val(n: int, fraction: float = 0.15, seed: int = 0) -> DatasetSplit:
    if n < 2:
        raise ValueError("need at least two sequences to split")
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    n_val = int(round(fraction * n))
    perm = np.random.default_rng(seed).permutation(n)
    return DatasetSplit(train=np.sort(perm[n_val:]), validation=np.sort(perm[:n_val]), seed=seed)


def batch_iter(indices: Sequence[int], batch_size: int, shuffle_seed: int | None = None,
               epoch: int = 0) -> Iterator[np.ndarray]:
    """Yield index batches; the last partial batch is kept."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size == 0:
        raise ValueError("empty split")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if shuffle_seed is not None:
        rng = np.random.default_rng(np.random.SeedSequence([shuffle_seed, epoch]))
        indices = indices[rng.permutation(indices.size)]
    for start in range(0, indices.size, batch_size):
        yield indices[start:start + batch_size]


class BinnedDataset:
    """Binned counts for a list of sequences, with per-sample augmentation."""

    def __init__(self, x: np.ndarray, y: np.ndarray):
        self.x = x  # (N, T, C)
        self.y = y

    @classmethod
    def from_sequences(cls, sequences, steps: int, window: float = WINDOW):
        return cls(*bin_all(sequences, steps, window))

    @classmethod
    def from_file(cls, path, steps: int, window: float = WINDOW):
        return cls.from_sequences(load_events(path), steps, window)

    def __len__(self):
        return len(self.y)

    @property
    def steps(self) -> int:
        return self.x.shape[1]

    @property
    def channels(self) -> int:
        return self.x.shape[2]

    def batch(self, idx: np.ndarray, augment: str | None = None, seed: int = 0,
              epoch: int = 0) -> tuple[np.ndarray, np.ndarray]:
        """``(T, C, N)`` inputs and labels for the given sample indices."""
        xs = self.x[idx]
        if augment is not None:
            xs = np.stack([
                roll_channels(xs[j], roll_offsets(sample_rng(seed, int(i), epoch), self.steps, augment))
                for j, i in enumerate(idx)
            ])
        return np.ascontiguousarray(xs.transpose(1, 2, 0), dtype=np.float64), self.y[idx]

    def subset(self, idx) -> "BinnedDataset":
        return BinnedDataset(self.x[idx], self.y[idx])
