"""Continual-learning metrics: accuracy grid summaries, drift, calibration, logit norms."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import no_grad


class MetricStateError(RuntimeError):
    pass


class UndefinedMetricError(ValueError):
    pass


class AccuracyMatrix:
    """``a[k, j]``: accuracy on task k's test set after finishing task j (0-based storage)."""

    def __init__(self, num_tasks: int):
        self.values = np.full((num_tasks, num_tasks), np.nan)

    @classmethod
    def from_array(cls, values) -> "AccuracyMatrix":
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] != values.shape[1]:
            raise ValueError(f"accuracy matrix must be square, got {values.shape}")
        m = cls(values.shape[0])
        m.values = values.copy()
        return m

    @property
    def num_tasks(self) -> int:
        return self.values.shape[0]

    def record(self, after_task: int, accuracies) -> None:
        self.values[:, after_task - 1] = accuracies

    def __getitem__(self, kj):
        k, j = kj
        return self.values[k - 1, j - 1]


def last_accuracy(m: AccuracyMatrix) -> float:
    final = m.values[:, -1]
    if np.isnan(final).any():
        raise MetricStateError("final column of the accuracy matrix is incomplete")
    return float(final.mean())


def backward_transfer(m: AccuracyMatrix) -> float:
    n = m.num_tasks
    if n < 2:
        raise UndefinedMetricError("backward transfer needs at least two tasks")
    final = m.values[:-1, -1]
    diag = np.diag(m.values)[:-1]
    if np.isnan(final).any() or np.isnan(diag).any():
        raise MetricStateError("diagonal or final column of the accuracy matrix is incomplete")
    return float(np.mean(final - diag))


def representation_drift(current, previous, probe_inputs: np.ndarray) -> float:
    """Mean l2 displacement of encoder outputs between two model snapshots."""
    probe_inputs = np.asarray(probe_inputs, dtype=np.float64)
    if probe_inputs.size == 0:
        raise MetricStateError("representation drift needs a nonempty probe set")
    with no_grad():
        z_now = current.encode(probe_inputs).values
        z_before = previous.encode(probe_inputs).values
    return float(np.linalg.norm(z_now - z_before, axis=1).mean())


@dataclass
class DriftRecord:
    iteration: int
    task_id: int
    drift: float
    boundary: bool


@dataclass
class DriftSeries:
    records: list[DriftRecord] = field(default_factory=list)

    def append(self, iteration: int, task_id: int, drift: float, boundary: bool) -> None:
        if self.records and iteration <= self.records[-1].iteration:
            raise ValueError("drift probe iterations must be strictly increasing")
        if drift < 0:
            raise ValueError("drift must be nonnegative")
        self.records.append(DriftRecord(iteration, task_id, drift, boundary))

    def for_task(self, task_id: int) -> list[DriftRecord]:
        return [r for r in self.records if r.task_id == task_id]


@dataclass
class CalibrationBin:
    lower: float
    upper: float
    mean_confidence: float
    accuracy: float
    count: int


@dataclass
class CalibrationReport:
    bins: list[CalibrationBin]
    ece: float

    @property
    def total(self) -> int:
        return sum(b.count for b in self.bins)


def ece(confidences, correct, bins: int = 10) -> CalibrationReport:
    """Expected calibration error over equal-width, right-closed bins on [0, 1]."""
    conf = np.asarray(confidences, dtype=np.float64).reshape(-1)
    hit = np.asarray(correct, dtype=bool).reshape(-1)
    if conf.size == 0 or bins < 1:
        raise ValueError("ece needs at least one sample and one bin")
    if conf.size != hit.size:
        raise ValueError("confidences and correctness flags differ in length")
    if np.any((conf < 0) | (conf > 1)) or not np.all(np.isfinite(conf)):
        raise ValueError("confidences must lie in [0, 1]")
    edges = np.linspace(0.0, 1.0, bins + 1)
    # right-closed (lo, hi]; confidence 0 goes to the first bin
    idx = np.clip(np.searchsorted(edges, conf, side="left") - 1, 0, bins - 1)
    report, total = [], conf.size
    score = 0.0
    for b in range(bins):
        mask = idx == b
        count = int(mask.sum())
        if count:
            mc, acc = float(conf[mask].mean()), float(hit[mask].mean())
            score += count / total * abs(mc - acc)
        else:
            mc = acc = 0.0
        report.append(CalibrationBin(float(edges[b]), float(edges[b + 1]), mc, acc, count))
    return CalibrationReport(report, float(score))


def logit_norm_stats(logits_per_task) -> list[tuple[float, float]]:
    """Per-task (mean, std) of row-wise l2 norms of raw logits."""
    stats = []
    for logits in logits_per_task:
        values = logits.values if hasattr(logits, "values") else np.asarray(logits, dtype=np.float64)
        norms = np.linalg.norm(values, axis=1)
        stats.append((float(norms.mean()), float(norms.std())))
    return stats
