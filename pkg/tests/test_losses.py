import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from driftbench import losses as L
from driftbench import tensor as T
from driftbench.buffer import ReplayBatch
from driftbench.gradcheck import param_gradcheck, tiny_problem
from driftbench.losses import LabelError, LossWeights, ReplayUnavailableError, SimilarityParams, Stage
from driftbench.model import EncoderConfig, init_model
from driftbench.tensor import Tensor, finite_diff_check

EPS = SimilarityParams().clamp_eps


def naive_ce(logits, labels):
    total = 0.0
    for row, y in zip(logits, labels):
        denom = sum(math.exp(v) for v in row)
        total += -math.log(math.exp(row[y]) / denom)
    return total / len(labels)


def brute_supcon(out, labels, temp):
    v = out / np.linalg.norm(out, axis=1, keepdims=True)
    n, total, anchors = len(labels), 0.0, 0
    for i in range(n):
        pos = [p for p in range(n) if p != i and labels[p] == labels[i]]
        if not pos:
            continue
        anchors += 1
        denom = sum(math.exp(v[i] @ v[a] / temp) for a in range(n) if a != i)
        total += -sum(math.log(math.exp(v[i] @ v[p] / temp) / denom) for p in pos) / len(pos)
    return total / anchors


def batch_of(x, y, z1, z2):
    n = len(y)
    return ReplayBatch(np.asarray(x, float), np.asarray(y), np.asarray(z1, float), np.asarray(z2, float),
                       np.ones(n, dtype=np.int64), np.zeros(n, dtype=np.int64))


# cross-entropy

def test_cross_entropy_examples():
    assert L.cross_entropy(Tensor([[0.0, 0.0]]), [0]).item() == pytest.approx(math.log(2), abs=1e-12)
    assert L.cross_entropy(Tensor([[100.0, -100.0]]), [0]).item() == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_matches_naive_softmax():
    rng = np.random.default_rng(0)
    logits, labels = rng.normal(size=(5, 4)) * 3, rng.integers(0, 4, size=5)
    assert abs(L.cross_entropy(Tensor(logits), labels).item() - naive_ce(logits, labels)) < 1e-10


def test_cross_entropy_label_out_of_range():
    with pytest.raises(LabelError, match="position 1"):
        L.cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


# supervised contrastive

def test_supcon_identical_pair_is_zero():
    out = Tensor([[1.0, 2.0], [1.0, 2.0]])
    assert L.sup_contrastive(out, [1, 1], 0.8).item() == pytest.approx(0.0, abs=1e-12)


def test_supcon_without_positives_is_zero():
    out = Tensor(np.random.default_rng(1).normal(size=(4, 3)))
    assert L.sup_contrastive(out, [0, 1, 2, 3], 0.8).item() == 0.0


def test_supcon_matches_brute_force():
    rng = np.random.default_rng(2)
    for temp in (0.8, 0.1):
        out = rng.normal(size=(4, 3))
        labels = np.array([0, 1, 0, 1])
        got = L.sup_contrastive(Tensor(out), labels, temp).item()
        assert abs(got - brute_supcon(out, labels, temp)) < 1e-10


def test_supcon_skips_anchors_without_positives():
    rng = np.random.default_rng(3)
    out, labels = rng.normal(size=(5, 3)), np.array([0, 0, 1, 2, 2])
    assert abs(L.sup_contrastive(Tensor(out), labels, 0.5).item() - brute_supcon(out, labels, 0.5)) < 1e-10


def test_supcon_gradient():
    out = Tensor(np.random.default_rng(4).normal(size=(6, 4)))
    assert finite_diff_check(lambda t: L.sup_contrastive(t, [0, 1, 0, 1, 2, 2], 0.8), out) < 1e-4


# similarity and discrepancy

def test_similarity_examples():
    s = L.similarity(Tensor([0.0, 1.0, 10.0])).values
    assert s[0] == pytest.approx(1 - EPS, abs=1e-15)
    assert s[1] == pytest.approx(math.exp(-1), abs=1e-12)
    assert s[2] == pytest.approx(EPS, abs=1e-20)


def two_rows_at_distance(d):
    theta = 2 * math.asin(d / 2)
    return Tensor([[1.0, 0.0], [math.cos(theta), math.sin(theta)]])


def test_discrepancy_half_similarity():
    rows = two_rows_at_distance(math.sqrt(math.log(2)))
    q = L.similarity(T.pairwise_distances(T.l2_normalize_rows(rows))).values
    np.testing.assert_allclose(q, 0.5, atol=1e-12)
    assert L.discrepancy(rows, rows).item() == pytest.approx(math.log(0.5), abs=1e-10)
    assert L.adaptation_discrepancy(rows, rows).item() == pytest.approx(0.6931471805599453, abs=1e-10)


def test_discrepancy_constant_outputs_near_zero():
    rows = Tensor(np.tile([[0.3, -1.2, 0.5]], (4, 1)))
    value = L.discrepancy(rows, rows).item()
    expected = (1 - EPS) * math.log(1 - EPS) + EPS * math.log(EPS)
    assert value == pytest.approx(expected, abs=1e-12)
    assert abs(value) < 1e-5
    assert abs(L.adaptation_discrepancy(rows, rows).item()) < 1e-5


def test_discrepancy_gradient_on_logits2_path():
    rng = np.random.default_rng(5)
    l1 = Tensor(rng.normal(size=(5, 4)))
    l2 = Tensor(rng.normal(size=(5, 4)))
    assert finite_diff_check(lambda t: L.discrepancy(l1, t), l2) < 1e-4


def test_discrepancy_target_carries_no_gradient():
    rng = np.random.default_rng(6)
    l1 = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    l2 = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    with T.Tape():
        T.backward(L.discrepancy(l1, l2))
    np.testing.assert_array_equal(l1.grad, np.zeros((4, 3)))
    assert np.abs(l2.grad).sum() > 0


def test_adaptation_is_negated_divergence():
    rng = np.random.default_rng(7)
    for _ in range(100):
        n, c = rng.integers(2, 8), rng.integers(2, 6)
        a, b = Tensor(rng.normal(size=(n, c)) * 2), Tensor(rng.normal(size=(n, c)) * 2)
        assert abs(L.adaptation_discrepancy(a, b).item() + L.discrepancy(a, b).item()) < 1e-12


def test_agreement_objective_bounded_below_by_entropy():
    rng = np.random.default_rng(8)
    rows = Tensor(rng.normal(size=(6, 3)))
    p = L.similarity(T.pairwise_distances(T.l2_normalize_rows(rows))).values
    entropy = -np.mean(p * np.log(p) + (1 - p) * np.log(1 - p))
    assert L.adaptation_discrepancy(rows, rows).item() == pytest.approx(entropy, abs=1e-12)
    other = Tensor(rng.normal(size=(6, 3)))
    assert L.adaptation_discrepancy(rows, other).item() >= entropy


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 7))
def test_discrepancy_invariant_to_row_permutation(seed, n):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(n, 4)), rng.normal(size=(n, 4))
    perm = rng.permutation(n)
    base = L.symmetric_discrepancy(Tensor(a), Tensor(b)).item()
    permuted = L.symmetric_discrepancy(Tensor(a[perm]), Tensor(b[perm])).item()
    assert permuted == pytest.approx(base, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 8))
def test_supcon_invariant_to_row_permutation(seed, n):
    rng = np.random.default_rng(seed)
    out, labels = rng.normal(size=(n, 3)), rng.integers(0, 3, size=n)
    perm = rng.permutation(n)
    base = L.sup_contrastive(Tensor(out), labels, 0.8).item()
    assert L.sup_contrastive(Tensor(out[perm]), labels[perm], 0.8).item() == pytest.approx(base, abs=1e-10)


# replay consistency

def hand_model():
    m = init_model(EncoderConfig(2, 2, [2]), 0)
    m.params["encoder.0.weight"].values[...] = np.eye(2)
    m.params["head1.weight"].values[...] = np.eye(2)
    m.params["head2.weight"].values[...] = [[0.0, 1.0], [1.0, 0.0]]
    return m


def test_buffer_consistency_hand_computation():
    m = hand_model()
    batch = batch_of([[1.0, 2.0]], [1], [[0.0, 0.0]], [[2.0, 2.0]])
    w = LossWeights(alpha=0.3, beta=0.7)
    expected = 0.3 * (2.5 + 0.5) + 0.7 * math.log(1 + math.exp(-1))
    assert abs(L.buffer_consistency(m, batch, w).item() - expected) < 1e-10


def test_buffer_consistency_stored_logits_match_current():
    m = init_model(EncoderConfig(4, 3, [8]), 1)
    rng = np.random.default_rng(9)
    x, y = rng.normal(size=(5, 4)), np.array([0, 1, 2, 0, 1])
    _, o1, o2 = m.forward(x)
    batch = batch_of(x, y, o1.values, o2.values)
    w = LossWeights(alpha=5.0, beta=0.4, sw=0.1)
    classification = 0.4 * L.first_task_terms(o1, o2, y, w).item()
    assert L.buffer_consistency(m, batch, w).item() == pytest.approx(classification, abs=1e-12)
    assert L.buffer_consistency(m, batch, LossWeights(alpha=0.0, beta=0.0)).item() == 0.0


def test_buffer_consistency_rejects_wrong_logit_width():
    m = init_model(EncoderConfig(4, 3, [8]), 1)
    batch = batch_of(np.zeros((2, 4)), [0, 1], np.zeros((2, 2)), np.zeros((2, 2)))
    with pytest.raises(L.SchemaError):
        L.buffer_consistency(m, batch, LossWeights())


# first task and stage losses

def test_first_task_loss_components():
    m, (x, y), _ = tiny_problem(3)
    _, o1, o2 = m.forward(x)
    w = LossWeights(sw=0.3)
    expected = L.cross_entropy(o1, y).item() + 0.3 * L.sup_contrastive(o2, y, w.st).item()
    assert abs(L.first_task_loss(m, x, y, w).item() - expected) < 1e-12
    assert L.first_task_loss(m, x, y, LossWeights(sw=0.0)).item() == pytest.approx(L.cross_entropy(o1, y).item(), abs=1e-15)


def test_first_task_loss_single_sample():
    m, (x, y), _ = tiny_problem(4)
    _, o1, _ = m.forward(x[:1])
    assert L.first_task_loss(m, x[:1], y[:1], LossWeights(sw=1.0)).item() == pytest.approx(
        L.cross_entropy(o1, y[:1]).item(), abs=1e-15)


def test_divergence_without_weight_is_buffer_consistency():
    m, cur, replay = tiny_problem(5)
    w = LossWeights(w_div=0.0)
    got = L.stage_loss(Stage.DIVERGENCE, cur, replay, m, w).item()
    assert got == pytest.approx(L.buffer_consistency(m, replay, w).item(), abs=1e-12)


def test_divergence_and_adaptation_differ_by_discrepancy():
    m, cur, replay = tiny_problem(6)
    w = LossWeights(w_div=0.25, w_adapt=1.5)
    _, o1, o2 = m.forward(cur[0])
    l2 = L.symmetric_discrepancy(o1, o2).item()
    d = L.stage_loss(Stage.DIVERGENCE, cur, replay, m, w).item()
    a = L.stage_loss(Stage.ADAPTATION, cur, replay, m, w).item()
    assert d - a == pytest.approx((w.w_div + w.w_adapt) * l2, abs=1e-12)


def test_refinement_is_first_task_terms_plus_replay():
    m, (x, y), replay = tiny_problem(7)
    w = LossWeights()
    expected = L.first_task_loss(m, x, y, w).item() + L.buffer_consistency(m, replay, w).item()
    assert L.stage_loss(Stage.REFINEMENT, (x, y), replay, m, w).item() == pytest.approx(expected, abs=1e-12)


def test_ablation_drops_terms():
    m, cur, replay = tiny_problem(8)
    w = LossWeights()
    only_replay = L.buffer_consistency(m, replay, w).item()
    for stage, term in ((Stage.DIVERGENCE, "L2"), (Stage.ADAPTATION, "L4"), (Stage.REFINEMENT, "L1")):
        assert L.stage_loss(stage, cur, replay, m, w, ablate={term}).item() == pytest.approx(only_replay, abs=1e-12)
    assert L.stage_loss(Stage.REFINEMENT, cur, replay, m, w, ablate={"L1", "L3"}).item() == 0.0


def test_stage_loss_requires_replay_after_first_task():
    m, cur, _ = tiny_problem(9)
    with pytest.raises(ReplayUnavailableError):
        L.stage_loss(Stage.ADAPTATION, cur, None, m, LossWeights())
    L.stage_loss(Stage.FIRST_TASK, cur, None, m, LossWeights())


@pytest.mark.parametrize("stage", [Stage.DIVERGENCE, Stage.ADAPTATION, Stage.REFINEMENT, Stage.FIRST_TASK])
def test_stage_loss_parameter_gradients(stage):
    m, cur, replay = tiny_problem(10)
    w = LossWeights(alpha=0.3, beta=0.7, sw=0.5)
    err = param_gradcheck(m, lambda mm: L.stage_loss(stage, cur, replay, mm, w))
    assert err < 1e-4


def test_similarity_parameters_validated():
    with pytest.raises(ValueError):
        SimilarityParams(sigma_sq=0.0)
    with pytest.raises(ValueError):
        LossWeights(st=0.0)
