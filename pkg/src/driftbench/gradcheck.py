"""Finite-difference verification of every training objective on a small model."""
from __future__ import annotations

import numpy as np

from . import losses as L
from .buffer import ReplayBatch
from .losses import LossWeights, SimilarityParams, Stage, TargetCache
from .model import DualHeadModel, EncoderConfig, init_model
from .tensor import Tensor, finite_diff_check, no_grad


def param_gradcheck(model: DualHeadModel, loss_fn, h: float = 1e-5) -> float:
    """Worst relative gradient error of ``loss_fn(model)`` over all parameters.

    Discrepancy targets are pinned at their unperturbed values, matching the
    stop-gradient the autodiff path applies.
    """
    cache = TargetCache()
    with cache.recording(), no_grad():
        loss_fn(model)
    worst = 0.0
    for name in list(model.params):
        original = model.params[name]

        def f(leaf: Tensor) -> Tensor:
            model.params[name] = leaf
            try:
                with cache.replaying():
                    return loss_fn(model)
            finally:
                model.params[name] = original

        worst = max(worst, finite_diff_check(f, original, h))
    model.zero_grad()
    return worst


def tiny_problem(seed: int = 0, input_dim: int = 8, hidden=(16, 16), num_classes: int = 4, batch: int = 6):
    """Random model, current batch and replay batch for gradient checks."""
    rng = np.random.default_rng(seed)
    model = init_model(EncoderConfig(input_dim, num_classes, list(hidden)), seed)
    x = rng.normal(size=(batch, input_dim))
    y = np.arange(batch) % max(1, num_classes // 2)
    replay = ReplayBatch(
        x=rng.normal(size=(batch, input_dim)),
        y=np.arange(batch) % num_classes,
        zeta1=rng.normal(size=(batch, num_classes)),
        zeta2=rng.normal(size=(batch, num_classes)),
        task_ids=np.ones(batch, dtype=np.int64),
        epochs=np.zeros(batch, dtype=np.int64),
    )
    return model, (x, y), replay


def loss_suite(w: LossWeights | None = None, sp: SimilarityParams | None = None) -> dict:
    w = w or LossWeights(alpha=0.3, beta=0.7, sw=0.5, st=0.8)
    sp = sp or SimilarityParams()

    def heads(m, x):
        _, o1, o2 = m.forward(x)
        return o1, o2

    return {
        "L_ce": lambda m, cur, buf: L.cross_entropy(heads(m, cur[0])[0], cur[1]),
        "SupCon": lambda m, cur, buf: L.sup_contrastive(heads(m, cur[0])[1], cur[1], w.st),
        "L2": lambda m, cur, buf: L.symmetric_discrepancy(*heads(m, cur[0]), sp),
        "L3": lambda m, cur, buf: L.buffer_consistency(m, buf, w),
        "L4": lambda m, cur, buf: L.adaptation_discrepancy(*heads(m, cur[0]), sp),
        "L_D": lambda m, cur, buf: L.stage_loss(Stage.DIVERGENCE, cur, buf, m, w, sp),
        "L_A": lambda m, cur, buf: L.stage_loss(Stage.ADAPTATION, cur, buf, m, w, sp),
        "L_R": lambda m, cur, buf: L.stage_loss(Stage.REFINEMENT, cur, buf, m, w, sp),
    }


def run_suite(seeds=(0, 1, 2), h: float = 1e-5) -> dict[str, float]:
    """Max relative error per objective over the given random problems."""
    worst: dict[str, float] = {}
    for seed in seeds:
        model, current, replay = tiny_problem(seed)
        for name, fn in loss_suite().items():
            err = param_gradcheck(model, lambda m: fn(m, current, replay), h)
            worst[name] = max(worst.get(name, 0.0), err)
    return worst
