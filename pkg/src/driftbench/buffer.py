"""Bounded episodic memory filled by reservoir or intermediary reservoir sampling."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .losses import ReplayUnavailableError


class SnapshotDecodeError(ValueError):
    pass


@dataclass
class BufferEntry:
    input: np.ndarray
    label: int
    zeta1: np.ndarray
    zeta2: np.ndarray
    task_id: int
    epoch_of_origin: int

    def __eq__(self, other):
        if not isinstance(other, BufferEntry):
            return NotImplemented
        return (self.label == other.label and self.task_id == other.task_id
                and self.epoch_of_origin == other.epoch_of_origin
                and np.array_equal(self.input, other.input)
                and np.array_equal(self.zeta1, other.zeta1)
                and np.array_equal(self.zeta2, other.zeta2))


@dataclass
class ReplayBatch:
    x: np.ndarray
    y: np.ndarray
    zeta1: np.ndarray
    zeta2: np.ndarray
    task_ids: np.ndarray
    epochs: np.ndarray

    def __len__(self) -> int:
        return len(self.y)


@dataclass
class ReplayBuffer:
    capacity: int
    entries: list[BufferEntry] = field(default_factory=list)
    seen: int = 0

    def __post_init__(self):
        if self.capacity < 0:
            raise ValueError(f"capacity must be >= 0, got {self.capacity}")

    def __len__(self) -> int:
        return len(self.entries)

    def is_empty(self) -> bool:
        return not self.entries

    def inputs(self) -> np.ndarray:
        return np.stack([e.input for e in self.entries]) if self.entries else np.empty((0, 0))

    def as_batch(self, entries: list[BufferEntry] | None = None) -> ReplayBatch:
        entries = self.entries if entries is None else entries
        return ReplayBatch(
            x=np.stack([e.input for e in entries]),
            y=np.array([e.label for e in entries], dtype=np.int64),
            zeta1=np.stack([e.zeta1 for e in entries]),
            zeta2=np.stack([e.zeta2 for e in entries]),
            task_ids=np.array([e.task_id for e in entries], dtype=np.int64),
            epochs=np.array([e.epoch_of_origin for e in entries], dtype=np.int64),
        )


@dataclass(frozen=True)
class IrsConfig:
    sigma: float
    epochs_per_task: int

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"IRS sigma must be positive, got {self.sigma}")
        if self.epochs_per_task < 1:
            raise ValueError("epochs_per_task must be >= 1")

    @classmethod
    def default(cls, epochs_per_task: int) -> "IrsConfig":
        return cls(sigma=epochs_per_task / 6.0, epochs_per_task=epochs_per_task)


def reservoir_insert(buf: ReplayBuffer, e: BufferEntry, rng: np.random.Generator) -> bool:
    inserted = False
    if len(buf.entries) < buf.capacity:
        buf.entries.append(e)
        inserted = True
    elif buf.capacity > 0:
        i = int(rng.integers(0, buf.seen + 1))
        if i < buf.capacity:
            buf.entries[i] = e
            inserted = True
    buf.seen += 1
    return inserted


def gate_probability(epoch: int, cfg: IrsConfig) -> float:
    mean = cfg.epochs_per_task / 2.0
    density = math.exp(-((epoch - mean) ** 2) / (2.0 * cfg.sigma**2)) / (cfg.sigma * math.sqrt(2.0 * math.pi))
    return min(1.0, max(0.0, density))


def irs_insert(buf: ReplayBuffer, e: BufferEntry, epoch: int, cfg: IrsConfig,
               rng: np.random.Generator) -> bool:
    """Gaussian-gated reservoir insertion; rejected offers leave ``seen`` untouched.

    A certain gate (probability 1) consumes no random draw, so it replays the
    plain reservoir exactly on a shared generator.
    """
    gate = gate_probability(epoch, cfg)
    if gate < 1.0 and not rng.random() < gate:
        return False
    return reservoir_insert(buf, e, rng)


def sample_batch(buf: ReplayBuffer, k: int, rng: np.random.Generator) -> list[BufferEntry]:
    if not buf.entries:
        raise ReplayUnavailableError("cannot sample from an empty buffer")
    if k <= 0:
        return []
    k = min(k, len(buf.entries))
    idx = rng.choice(len(buf.entries), size=k, replace=False)
    return [buf.entries[i] for i in idx]


# Snapshot layout (little-endian):
#   magic b"DBRB", u32 version, u32 capacity, u64 seen, u32 count, u32 D, u32 C,
#   then count fixed-width records: D f64 input, i64 label, C f64 zeta1,
#   C f64 zeta2, i64 task_id, i64 epoch_of_origin.
SNAPSHOT_MAGIC = b"DBRB"
SNAPSHOT_VERSION = 1
_HEADER = struct.Struct("<4sIIQIII")


def _record_dtype(d: int, c: int) -> np.dtype:
    return np.dtype([("input", "<f8", (d,)), ("label", "<i8"), ("zeta1", "<f8", (c,)),
                     ("zeta2", "<f8", (c,)), ("task_id", "<i8"), ("epoch", "<i8")])


def snapshot(buf: ReplayBuffer) -> bytes:
    count = len(buf.entries)
    d = buf.entries[0].input.size if count else 0
    c = buf.entries[0].zeta1.size if count else 0
    records = np.zeros(count, dtype=_record_dtype(d, c))
    for i, e in enumerate(buf.entries):
        records[i] = (e.input, e.label, e.zeta1, e.zeta2, e.task_id, e.epoch_of_origin)
    header = _HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, buf.capacity, buf.seen, count, d, c)
    return header + records.tobytes()


def restore(data: bytes) -> ReplayBuffer:
    if len(data) < _HEADER.size:
        raise SnapshotDecodeError(f"snapshot too short ({len(data)} bytes)")
    magic, version, capacity, seen, count, d, c = _HEADER.unpack_from(data)
    if magic != SNAPSHOT_MAGIC:
        raise SnapshotDecodeError("bad snapshot magic")
    if version != SNAPSHOT_VERSION:
        raise SnapshotDecodeError(f"unsupported snapshot version {version}")
    dtype = _record_dtype(d, c)
    expected = _HEADER.size + count * dtype.itemsize
    if len(data) != expected:
        raise SnapshotDecodeError(f"snapshot declares {count} records ({expected} bytes) but holds {len(data)} bytes")
    if count > capacity:
        raise SnapshotDecodeError(f"snapshot holds {count} records but capacity is {capacity}")
    records = np.frombuffer(data, dtype=dtype, count=count, offset=_HEADER.size)
    entries = [BufferEntry(input=r["input"].astype(np.float64), label=int(r["label"]),
                           zeta1=r["zeta1"].astype(np.float64), zeta2=r["zeta2"].astype(np.float64),
                           task_id=int(r["task_id"]), epoch_of_origin=int(r["epoch"]))
               for r in records]
    return ReplayBuffer(capacity=capacity, entries=entries, seen=seen)
