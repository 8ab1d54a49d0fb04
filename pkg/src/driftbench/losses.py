"""Differentiable training objectives for the dual-head model.

Stage losses compose four pieces: a first-task objective (cross-entropy on
head 1 plus supervised contrastive on head 2), a discrepancy term comparing
the pairwise similarity structure of the two heads' normalized logits, its
negation used for agreement, and a replay consistency term over buffer
samples.
"""
from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import tensor as T
from .tensor import BatchTooSmallError, Tensor


class LabelError(ValueError):
    pass


class SchemaError(ValueError):
    pass


class ReplayUnavailableError(RuntimeError):
    pass


@dataclass(frozen=True)
class SimilarityParams:
    C1: float = 1.0
    mu: float = 0.0
    sigma_sq: float = 0.5
    clamp_eps: float = 1e-7

    def __post_init__(self):
        if self.C1 <= 0 or self.sigma_sq <= 0:
            raise ValueError("C1 and sigma_sq must be positive")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.1
    beta: float = 0.2
    sw: float = 0.05
    st: float = 0.8
    w_div: float = 0.1
    w_adapt: float = 1.0

    def __post_init__(self):
        if not self.st > 0:
            raise ValueError(f"contrastive temperature must be positive, got {self.st}")
        for name in ("alpha", "beta", "sw", "st", "w_div", "w_adapt"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")


class Stage(str, Enum):
    DIVERGENCE = "divergence"
    ADAPTATION = "adaptation"
    REFINEMENT = "refinement"
    FIRST_TASK = "first_task"


def _labels(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    bad = np.flatnonzero((labels < 0) | (labels >= num_classes))
    if bad.size:
        raise LabelError(f"label {labels[bad[0]]} at position {bad[0]} outside [0, {num_classes})")
    return labels


def cross_entropy(logits: Tensor, labels) -> Tensor:
    n, c = logits.shape
    labels = _labels(labels, c)
    if labels.size != n:
        raise SchemaError(f"{labels.size} labels for {n} logit rows")
    picked = T.log_softmax(logits)[np.arange(n), labels]
    return T.mul(T.mean(picked), -1.0)


def mse(a: Tensor, b) -> Tensor:
    return T.mean(T.square(T.sub(a, b)))


def sup_contrastive(outputs: Tensor, labels, st: float) -> Tensor:
    """Supervised contrastive loss over l2-normalized rows of ``outputs``.

    Anchors without a positive are skipped; if none has one the loss is 0.
    """
    n = outputs.shape[0]
    if n < 2:
        raise BatchTooSmallError(f"supervised contrastive loss needs >= 2 samples, got {n}")
    labels = np.asarray(labels).reshape(-1)
    eye = np.eye(n, dtype=bool)
    positives = (labels[:, None] == labels[None, :]) & ~eye
    counts = positives.sum(axis=1)
    anchors = counts > 0
    if not anchors.any():
        return T.mul(T.sum(outputs), 0.0)

    v = T.l2_normalize_rows(outputs)
    sim = T.mul(T.matmul(v, T.transpose(v)), 1.0 / st)
    others = (~eye).astype(np.float64)
    # shift by the per-row max over a != i (a constant), diagonal zeroed then masked out
    row_max = np.where(eye, -np.inf, sim.values).max(axis=1, keepdims=True)
    shifted = T.mul(T.sub(sim, row_max), others)
    log_denom = T.add(T.log(T.sum(T.mul(T.exp(shifted), others), axis=1, keepdims=True)), row_max)
    log_prob = T.sub(sim, log_denom)
    weights = np.where(anchors[:, None], positives / np.maximum(counts, 1)[:, None], 0.0)
    per_anchor = T.sum(T.mul(log_prob, weights), axis=1)
    return T.mul(T.sum(per_anchor), -1.0 / anchors.sum())


def _sup_contrastive_or_zero(outputs: Tensor, labels, st: float) -> Tensor:
    if outputs.shape[0] < 2:
        return T.mul(T.sum(outputs), 0.0)
    return sup_contrastive(outputs, labels, st)


def similarity(distances: Tensor, sp: SimilarityParams = SimilarityParams()) -> Tensor:
    """Gaussian similarity of distances, clamped away from 0 and 1."""
    centered = T.sub(distances, sp.mu)
    raw = T.mul(T.exp(T.mul(T.square(centered), -1.0 / (2.0 * sp.sigma_sq))), sp.C1)
    return T.clip(raw, sp.clamp_eps, 1.0 - sp.clamp_eps)


class TargetCache:
    """Pins the stop-gradient discrepancy targets across repeated evaluations.

    Finite-difference checks of the discrepancy must hold its target fixed at
    the unperturbed value, exactly as autodiff does.
    """

    def __init__(self):
        self.targets: list[np.ndarray] = []
        self._cursor = 0
        self._replay = False

    def provide(self, compute) -> np.ndarray:
        if not self._replay:
            self.targets.append(compute())
            return self.targets[-1]
        value = self.targets[self._cursor % len(self.targets)]
        self._cursor += 1
        return value

    @contextlib.contextmanager
    def recording(self):
        self.targets, self._replay = [], False
        token = _TARGETS.set(self)
        try:
            yield self
        finally:
            _TARGETS.reset(token)

    @contextlib.contextmanager
    def replaying(self):
        self._cursor, self._replay = 0, True
        token = _TARGETS.set(self)
        try:
            yield self
        finally:
            _TARGETS.reset(token)


_TARGETS: contextvars.ContextVar[TargetCache | None] = contextvars.ContextVar("discrepancy_targets", default=None)


def discrepancy(logits1: Tensor, logits2: Tensor, sp: SimilarityParams = SimilarityParams()) -> Tensor:
    """Mean over pairs of p*log q + (1-p)*log(1-q).

    p comes from head-1 distances and is treated as a fixed target; q carries
    the gradient. Minimizing pushes q away from p.
    """
    if logits1.shape[0] < 2:
        raise BatchTooSmallError(f"discrepancy needs >= 2 samples, got {logits1.shape[0]}")
    if logits1.shape != logits2.shape:
        raise SchemaError(f"logit shapes differ: {logits1.shape} vs {logits2.shape}")

    def target() -> np.ndarray:
        with T.no_grad():
            return similarity(T.pairwise_distances(T.l2_normalize_rows(T.as_tensor(logits1.values))), sp).values

    cache = _TARGETS.get()
    p = target() if cache is None else cache.provide(target)
    q = similarity(T.pairwise_distances(T.l2_normalize_rows(logits2)), sp)
    terms = T.add(T.mul(T.log(q), p), T.mul(T.log(T.sub(1.0, q)), 1.0 - p))
    return T.mean(terms)


def adaptation_discrepancy(logits1: Tensor, logits2: Tensor, sp: SimilarityParams = SimilarityParams()) -> Tensor:
    return T.mul(discrepancy(logits1, logits2, sp), -1.0)


def symmetric_discrepancy(logits1: Tensor, logits2: Tensor, sp: SimilarityParams = SimilarityParams()) -> Tensor:
    """Average of the discrepancy with head roles swapped, so both heads get gradient."""
    return T.mul(T.add(discrepancy(logits1, logits2, sp), discrepancy(logits2, logits1, sp)), 0.5)


def buffer_consistency(m, batch, w: LossWeights) -> Tensor:
    """Replay term: alpha * (logit MSE on both heads) + beta * (CE + sw * SupCon).

    ``batch`` exposes ``x``, ``y``, ``zeta1``, ``zeta2`` arrays.
    """
    if len(batch.y) == 0:
        raise ReplayUnavailableError("buffer batch is empty")
    c = m.cfg.num_classes
    if batch.zeta1.shape[1] != c or batch.zeta2.shape[1] != c:
        raise SchemaError(f"stored logits have width {batch.zeta1.shape[1]}/{batch.zeta2.shape[1]}, model has {c} classes")
    _, out1, out2 = m.forward(batch.x)
    consistency = T.add(mse(out1, batch.zeta1), mse(out2, batch.zeta2))
    classification = T.add(cross_entropy(out1, batch.y),
                           T.mul(_sup_contrastive_or_zero(out2, batch.y, w.st), w.sw))
    return T.add(T.mul(consistency, w.alpha), T.mul(classification, w.beta))


def first_task_terms(out1: Tensor, out2: Tensor, y, w: LossWeights) -> Tensor:
    return T.add(cross_entropy(out1, y), T.mul(_sup_contrastive_or_zero(out2, y, w.st), w.sw))


def first_task_loss(m, x, y, w: LossWeights) -> Tensor:
    _, out1, out2 = m.forward(x)
    return first_task_terms(out1, out2, y, w)


def stage_loss(stage: Stage, current, buffer_batch, m, w: LossWeights,
               sp: SimilarityParams = SimilarityParams(), ablate=(),
               symmetric: bool = True) -> Tensor:
    """Composite per-stage objective.

    ``current`` is an (x, y) pair; ``buffer_batch`` a replay batch or None for
    the first task. ``ablate`` names terms to drop: any of "L1".."L4".
    """
    stage = Stage(stage)
    x, y = current
    ablate = set(ablate)
    if stage is Stage.FIRST_TASK:
        return first_task_loss(m, x, y, w)
    if buffer_batch is None or len(buffer_batch.y) == 0:
        raise ReplayUnavailableError(f"{stage.value} stage requires a nonempty buffer batch")

    disc = symmetric_discrepancy if symmetric else discrepancy
    _, out1, out2 = m.forward(x)
    if stage is Stage.DIVERGENCE:
        current_term = None if "L2" in ablate else T.mul(disc(out1, out2, sp), w.w_div)
    elif stage is Stage.ADAPTATION:
        current_term = None if "L4" in ablate else T.mul(T.mul(disc(out1, out2, sp), -1.0), w.w_adapt)
    else:
        current_term = None if "L1" in ablate else first_task_terms(out1, out2, y, w)
    replay_term = None if "L3" in ablate else buffer_consistency(m, buffer_batch, w)

    terms = [t for t in (current_term, replay_term) if t is not None]
    if not terms:
        return T.mul(T.sum(out1), 0.0)
    return terms[0] if len(terms) == 1 else T.add(*terms)
