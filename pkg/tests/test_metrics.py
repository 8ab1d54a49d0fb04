import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from driftbench.metrics import (AccuracyMatrix, DriftSeries, MetricStateError, UndefinedMetricError, backward_transfer,
                                ece, last_accuracy, logit_norm_stats, representation_drift)
from driftbench.model import EncoderConfig, init_model


def test_last_accuracy_examples():
    m = AccuracyMatrix.from_array([[0.8, 0.7], [np.nan, 0.6]])
    assert last_accuracy(m) == pytest.approx(0.65, abs=1e-15)
    assert last_accuracy(AccuracyMatrix.from_array(np.ones((3, 3)))) == 1.0
    assert last_accuracy(AccuracyMatrix.from_array([[0.42]])) == 0.42


def test_backward_transfer_examples():
    m = AccuracyMatrix.from_array([[0.8, 0.7], [np.nan, 0.6]])
    assert backward_transfer(m) == pytest.approx(-0.1, abs=1e-15)
    flat = AccuracyMatrix.from_array([[0.5, 0.5, 0.5], [0.0, 0.9, 0.9], [0.0, 0.0, 0.3]])
    assert backward_transfer(flat) == 0.0
    assert backward_transfer(AccuracyMatrix.from_array([[0.5, 0.6], [0.0, 0.9]])) > 0


def test_three_task_hand_computation():
    values = np.array([[0.9, 0.8, 0.6],
                       [0.0, 0.85, 0.75],
                       [0.0, 0.0, 0.95]])
    m = AccuracyMatrix.from_array(values)
    assert last_accuracy(m) == (0.6 + 0.75 + 0.95) / 3
    assert backward_transfer(m) == ((0.6 - 0.9) + (0.75 - 0.85)) / 2
    assert m[1, 3] == 0.6 and m[2, 2] == 0.85


def test_incomplete_or_undefined_matrices():
    m = AccuracyMatrix(3)
    m.record(1, [0.9, 0.1, 0.2])
    with pytest.raises(MetricStateError):
        last_accuracy(m)
    with pytest.raises(MetricStateError):
        backward_transfer(m)
    with pytest.raises(UndefinedMetricError):
        backward_transfer(AccuracyMatrix.from_array([[1.0]]))


def test_drift_identical_snapshots_is_zero():
    model = init_model(EncoderConfig(4, 2, [8]), 0)
    x = np.random.default_rng(0).normal(size=(10, 4))
    assert representation_drift(model, model.snapshot(), x) == 0.0


def test_drift_of_doubled_representation_is_mean_norm():
    model = init_model(EncoderConfig(4, 2, [8, 6]), 1)
    model.params["encoder.1.bias"].values[...] = 0.1
    doubled = model.snapshot()
    doubled.params["encoder.1.weight"].values *= 2
    doubled.params["encoder.1.bias"].values *= 2
    x = np.random.default_rng(1).normal(size=(12, 4))
    z = model.encode(x).values
    expected = np.linalg.norm(z, axis=1).mean()
    assert representation_drift(doubled, model, x) == pytest.approx(expected, rel=1e-12)
    assert representation_drift(model, doubled, x) == representation_drift(doubled, model, x)


def test_drift_needs_probes():
    model = init_model(EncoderConfig(4, 2, [8]), 0)
    with pytest.raises(MetricStateError):
        representation_drift(model, model, np.zeros((0, 4)))


def test_drift_series_ordering():
    series = DriftSeries()
    series.append(10, 1, 0.5, True)
    series.append(20, 2, 0.1, True)
    with pytest.raises(ValueError):
        series.append(20, 2, 0.1, False)
    with pytest.raises(ValueError):
        series.append(30, 2, -0.1, False)
    assert [r.iteration for r in series.for_task(2)] == [20]


def test_ece_examples():
    assert ece([1.0, 1.0, 1.0], [True, True, True]).ece == 0.0
    report = ece([0.9, 0.9], [True, False])
    assert report.ece == pytest.approx(0.4, abs=1e-15)
    occupied = [b for b in report.bins if b.count]
    assert len(occupied) == 1 and occupied[0].upper == pytest.approx(0.9)
    conf, hit = np.array([0.2, 0.7, 0.95, 0.55]), np.array([1, 0, 1, 1], bool)
    assert ece(conf, hit, bins=1).ece == pytest.approx(abs(conf.mean() - hit.mean()), abs=1e-15)


def test_ece_bins_are_right_closed():
    report = ece([0.1, 0.2, 0.0], [True, False, True], bins=10)
    assert [b.count for b in report.bins[:3]] == [2, 1, 0]
    assert report.total == 3


def test_ece_rejects_bad_input():
    with pytest.raises(ValueError):
        ece([], [])
    with pytest.raises(ValueError):
        ece([1.2], [True])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 40), elements=st.floats(0, 1)), st.integers(1, 15), st.integers(0, 2**31))
def test_ece_bounded_and_counts_complete(conf, bins, seed):
    hit = np.random.default_rng(seed).random(conf.size) < 0.5
    report = ece(conf, hit, bins)
    assert 0.0 <= report.ece <= 1.0
    assert report.total == conf.size


def test_logit_norm_examples():
    assert logit_norm_stats([np.array([[3.0, 4.0]])]) == [(5.0, 0.0)]
    assert logit_norm_stats([np.zeros((3, 4))])[0][0] == 0.0
    logits = np.random.default_rng(2).normal(size=(7, 3))
    base, scaled = logit_norm_stats([logits, -2.5 * logits])
    assert scaled[0] == pytest.approx(2.5 * base[0], rel=1e-12)
