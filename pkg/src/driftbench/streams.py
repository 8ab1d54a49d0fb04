"""Synthetic domain-incremental streams and the external dataset file format."""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

KINDS = ("rotated_blobs", "permuted_features", "noisy_channels")


class StreamConfigError(ValueError):
    pass


class DatasetSchemaError(ValueError):
    pass


@dataclass
class DomainTask:
    task_id: int
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    num_classes: int

    @property
    def input_dim(self) -> int:
        return self.x_train.shape[1]

    def __eq__(self, other):
        if not isinstance(other, DomainTask):
            return NotImplemented
        return (self.task_id == other.task_id and self.num_classes == other.num_classes
                and all(np.array_equal(getattr(self, f), getattr(other, f))
                        for f in ("x_train", "y_train", "x_test", "y_test")))


@dataclass(frozen=True)
class StreamSpec:
    kind: str = "rotated_blobs"
    num_domains: int = 5
    num_classes: int = 4
    input_dim: int = 16
    samples_per_domain: int = 500
    test_fraction: float = 0.25
    seed: int = 0
    radius: float = 3.0
    noise: float = 1.0
    domain_offset: float = 2.0

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise StreamConfigError(f"unknown stream kind {self.kind!r}; expected one of {KINDS}")
        if self.num_domains < 1:
            raise StreamConfigError("num_domains must be >= 1")
        if self.num_classes < 1 or self.input_dim < 1:
            raise StreamConfigError("num_classes and input_dim must be >= 1")
        if self.samples_per_domain < self.num_classes:
            raise StreamConfigError("samples_per_domain must be at least num_classes")
        if not 0.0 <= self.test_fraction < 1.0:
            raise StreamConfigError("test_fraction must lie in [0, 1)")
        if self.kind == "rotated_blobs" and self.input_dim < 2:
            raise StreamConfigError("rotated_blobs needs input_dim >= 2")


_PURPOSES = {"base": 1, "samples": 2, "style": 3, "shuffle": 4, "transform": 5}


def keyed_rng(seed: int, task_id: int, purpose: str) -> np.random.Generator:
    """Generator keyed by (seed, task, purpose); independent of other keys."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, task_id, _PURPOSES[purpose]])))


def _class_counts(total: int, c: int) -> np.ndarray:
    counts = np.full(c, total // c)
    counts[: total % c] += 1
    return counts


def _balanced_labels(spec: StreamSpec) -> tuple[np.ndarray, np.ndarray]:
    c = spec.num_classes
    train_counts = _class_counts(spec.samples_per_domain, c)
    ratio = spec.test_fraction / (1.0 - spec.test_fraction)
    test_counts = np.array([int(round(n * ratio)) for n in train_counts])
    return np.repeat(np.arange(c), train_counts), np.repeat(np.arange(c), test_counts)


def _rotated_blobs(spec: StreamSpec, t: int, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    c, d = spec.num_classes, spec.input_dim
    angle = (t - 1) * np.pi / spec.num_domains
    centroid_angles = 2 * np.pi * labels / c + angle
    noise_scale = spec.noise * keyed_rng(spec.seed, t, "style").uniform(0.8, 1.2)
    x = np.zeros((labels.size, d))
    plane = np.stack([np.cos(centroid_angles), np.sin(centroid_angles)], axis=1) * spec.radius
    plane = plane + rng.normal(0.0, noise_scale, size=plane.shape)
    x[:, :2] = plane
    if d > 2:
        # domain signature in the remaining coordinates; zero for the first domain
        offset = np.zeros(d - 2)
        if t > 1:
            direction = keyed_rng(spec.seed, t, "style").normal(size=d - 2)
            offset = spec.domain_offset * direction / np.linalg.norm(direction)
        x[:, 2:] = offset + rng.normal(0.0, 0.5 * noise_scale, size=(labels.size, d - 2))
    return x


def _base_blobs(spec: StreamSpec, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    centres = keyed_rng(spec.seed, 0, "base").normal(0.0, spec.radius / np.sqrt(spec.input_dim),
                                                     size=(spec.num_classes, spec.input_dim))
    return centres[labels] + rng.normal(0.0, spec.noise, size=(labels.size, spec.input_dim))


def _permuted(spec: StreamSpec, t: int, labels, rng) -> np.ndarray:
    x = _base_blobs(spec, labels, rng)
    if t == 1:
        return x
    return x[:, keyed_rng(spec.seed, t, "transform").permutation(spec.input_dim)]


def _noisy(spec: StreamSpec, t: int, labels, rng) -> np.ndarray:
    x = _base_blobs(spec, labels, rng)
    if t == 1:
        return x
    trng = keyed_rng(spec.seed, t, "transform")
    channels = trng.choice(spec.input_dim, size=max(1, spec.input_dim // 2), replace=False)
    factor = trng.uniform(-2.0, 2.0)
    x[:, channels] *= factor
    return x + rng.normal(0.0, 0.25 * (t - 1) * spec.noise, size=x.shape)


_GENERATORS = {"rotated_blobs": _rotated_blobs, "permuted_features": _permuted, "noisy_channels": _noisy}


def generate(spec: StreamSpec) -> list[DomainTask]:
    spec.validate()
    y_train, y_test = _balanced_labels(spec)
    tasks = []
    for t in range(1, spec.num_domains + 1):
        rng = keyed_rng(spec.seed, t, "samples")
        labels = np.concatenate([y_train, y_test])
        x = _GENERATORS[spec.kind](spec, t, labels, rng)
        n_tr = y_train.size
        order = keyed_rng(spec.seed, t, "shuffle").permutation(n_tr)
        tasks.append(DomainTask(task_id=t, x_train=x[:n_tr][order], y_train=y_train[order].copy(),
                                x_test=x[n_tr:], y_test=y_test.copy(), num_classes=spec.num_classes))
    return tasks


def joint_view(tasks: list[DomainTask], seed: int = 0) -> DomainTask:
    """All tasks' train and test sets concatenated and shuffled by ``seed``.

    A single task comes back unchanged (batch order is already shuffled per epoch).
    """
    if not tasks:
        raise DatasetSchemaError("joint view of an empty task list")
    c, d = tasks[0].num_classes, tasks[0].input_dim
    for task in tasks:
        if task.num_classes != c or task.input_dim != d:
            raise DatasetSchemaError(f"task {task.task_id} has C={task.num_classes}, D={task.input_dim}; expected C={c}, D={d}")
    if len(tasks) == 1:
        return tasks[0]
    x_tr = np.concatenate([t.x_train for t in tasks])
    y_tr = np.concatenate([t.y_train for t in tasks])
    x_te = np.concatenate([t.x_test for t in tasks])
    y_te = np.concatenate([t.y_test for t in tasks])
    rng = keyed_rng(seed, 0, "shuffle")
    tr, te = rng.permutation(y_tr.size), rng.permutation(y_te.size)
    return DomainTask(task_id=1, x_train=x_tr[tr], y_train=y_tr[tr], x_test=x_te[te], y_test=y_te[te], num_classes=c)


# Dataset file layout (little-endian):
#   magic b"DBDS", u32 version, u32 T, u32 C, u32 D,
#   T x (u32 n_train, u32 n_test),
#   then per task, n_train then n_test records of D f64 values + one i64 label,
#   u32 CRC32 of everything before it.
DATASET_MAGIC = b"DBDS"
DATASET_VERSION = 1
_DS_HEADER = struct.Struct("<4sIIII")


def _row_dtype(d: int) -> np.dtype:
    return np.dtype([("x", "<f8", (d,)), ("label", "<i8")])


def write_external(tasks: list[DomainTask], path) -> None:
    c, d = tasks[0].num_classes, tasks[0].input_dim
    dtype = _row_dtype(d)
    chunks = [_DS_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, len(tasks), c, d)]
    chunks += [struct.pack("<II", t.y_train.size, t.y_test.size) for t in tasks]
    for t in tasks:
        for x, y in ((t.x_train, t.y_train), (t.x_test, t.y_test)):
            rows = np.zeros(y.size, dtype=dtype)
            rows["x"], rows["label"] = x, y
            chunks.append(rows.tobytes())
    body = b"".join(chunks)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_external(path) -> list[DomainTask]:
    data = Path(path).read_bytes()
    if len(data) < _DS_HEADER.size:
        raise DatasetSchemaError("dataset file shorter than its header")
    magic, version, n_tasks, c, d = _DS_HEADER.unpack_from(data)
    if magic != DATASET_MAGIC or version != DATASET_VERSION:
        raise DatasetSchemaError(f"not a version-{DATASET_VERSION} dataset file")
    off = _DS_HEADER.size
    if len(data) < off + 8 * n_tasks:
        raise DatasetSchemaError("dataset file truncated inside the record-count table")
    counts = [struct.unpack_from("<II", data, off + 8 * i) for i in range(n_tasks)]
    off += 8 * n_tasks
    dtype = _row_dtype(d)
    total = sum(a + b for a, b in counts)
    end = off + total * dtype.itemsize
    if len(data) < end:
        whole = (len(data) - off) // dtype.itemsize
        raise DatasetSchemaError(f"record {whole} is truncated: file holds {len(data) - off} record bytes, "
                                 f"{total} records need {total * dtype.itemsize}")
    if len(data) != end + 4:
        raise DatasetSchemaError(f"expected {end + 4} bytes, found {len(data)}")
    (crc,) = struct.unpack_from("<I", data, end)
    if crc != zlib.crc32(data[:end]):
        raise DatasetSchemaError("checksum mismatch")
    rows = np.frombuffer(data, dtype=dtype, count=total, offset=off)
    bad = np.flatnonzero((rows["label"] < 0) | (rows["label"] >= c))
    if bad.size:
        raise DatasetSchemaError(f"record {bad[0]} has label {rows['label'][bad[0]]} outside [0, {c})")
    tasks, pos = [], 0
    for i, (n_tr, n_te) in enumerate(counts):
        tr, te = rows[pos:pos + n_tr], rows[pos + n_tr:pos + n_tr + n_te]
        pos += n_tr + n_te
        tasks.append(DomainTask(task_id=i + 1, x_train=tr["x"].astype(np.float64), y_train=tr["label"].astype(np.int64),
                                x_test=te["x"].astype(np.float64), y_test=te["label"].astype(np.int64), num_classes=c))
    return tasks
