import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from driftbench.buffer import (BufferEntry, IrsConfig, ReplayBuffer, SnapshotDecodeError, gate_probability,
                               irs_insert, reservoir_insert, restore, sample_batch, snapshot)
from driftbench.losses import ReplayUnavailableError


def entry(i, d=3, c=2, task=1, epoch=0):
    return BufferEntry(input=np.full(d, float(i)), label=i % c, zeta1=np.full(c, i + 0.5),
                       zeta2=np.full(c, -i - 0.5), task_id=task, epoch_of_origin=epoch)


def test_reservoir_fills_empty_buffer_first():
    buf = ReplayBuffer(2)
    rng = np.random.default_rng(0)
    assert reservoir_insert(buf, entry(0), rng)
    assert reservoir_insert(buf, entry(1), rng)
    assert [e.label for e in buf.entries] == [0, 1]
    assert buf.seen == 2


def test_reservoir_capacity_zero_counts_but_never_stores():
    buf = ReplayBuffer(0)
    rng = np.random.default_rng(0)
    for i in range(5):
        assert not reservoir_insert(buf, entry(i), rng)
    assert buf.entries == [] and buf.seen == 5


def test_reservoir_inclusion_frequency():
    counts = np.zeros(100)
    for trial in range(2000):
        buf = ReplayBuffer(10)
        rng = np.random.default_rng(trial)
        for i in range(100):
            reservoir_insert(buf, entry(i, d=1), rng)
        for e in buf.entries:
            counts[int(e.input[0])] += 1
    freq = counts / 2000
    assert np.all(np.abs(freq - 0.10) < 0.03)


def test_gate_probability_values():
    cfg = IrsConfig.default(50)
    assert cfg.sigma == pytest.approx(50 / 6)
    assert gate_probability(25, cfg) == pytest.approx(0.047873, abs=1e-6)
    assert gate_probability(0, cfg) == pytest.approx(5.318e-4, rel=1e-3)
    assert gate_probability(25, IrsConfig(0.2, 50)) == 1.0


def test_gate_is_symmetric_about_midpoint():
    cfg = IrsConfig(3.0, 30)
    for k in range(16):
        assert gate_probability(15 - k, cfg) == pytest.approx(gate_probability(15 + k, cfg), abs=1e-15)


def test_certain_gate_replays_reservoir_exactly():
    cfg = IrsConfig(0.1, 10)
    assert gate_probability(5, cfg) == 1.0
    a, b = ReplayBuffer(7), ReplayBuffer(7)
    ra, rb = np.random.default_rng(42), np.random.default_rng(42)
    for i in range(200):
        reservoir_insert(a, entry(i), ra)
        irs_insert(b, entry(i), 5, cfg, rb)
    assert a == b
    assert ra.random() == rb.random()


def test_far_epochs_almost_never_inserted():
    cfg = IrsConfig(2.0, 50)
    buf = ReplayBuffer(10_000)
    rng = np.random.default_rng(1)
    accepted = sum(irs_insert(buf, entry(i), 0, cfg, rng) for i in range(10_000))
    assert accepted / 10_000 < 1e-3


def test_rejected_offers_do_not_count():
    buf = ReplayBuffer(5)
    rng = np.random.default_rng(2)
    for i in range(100):
        irs_insert(buf, entry(i), 0, IrsConfig(1.0, 50), rng)
    assert buf.seen == len(buf.entries)


def test_sample_batch_cases():
    buf = ReplayBuffer(5, [entry(i) for i in range(5)], seen=5)
    rng = np.random.default_rng(3)
    full = sample_batch(buf, 9, rng)
    assert sorted(e.label for e in full) == sorted(e.label for e in buf.entries)
    assert len({int(e.input[0]) for e in full}) == 5
    assert sample_batch(buf, 0, rng) == []
    with pytest.raises(ReplayUnavailableError):
        sample_batch(ReplayBuffer(3), 2, rng)


def test_sample_batch_uniform():
    buf = ReplayBuffer(5, [entry(i) for i in range(5)], seen=5)
    rng = np.random.default_rng(4)
    counts = np.zeros(5)
    for _ in range(10_000):
        counts[int(sample_batch(buf, 1, rng)[0].input[0])] += 1
    assert np.all(np.abs(counts / 10_000 - 0.2) < 0.02)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 20), st.integers(0, 40), st.integers(1, 5), st.integers(1, 4), st.integers(0, 2**31))
def test_snapshot_round_trip(capacity, offers, d, c, seed):
    buf = ReplayBuffer(capacity)
    rng = np.random.default_rng(seed)
    for i in range(offers):
        e = BufferEntry(rng.normal(size=d), int(rng.integers(0, c)), rng.normal(size=c), rng.normal(size=c),
                        int(rng.integers(1, 6)), int(rng.integers(0, 50)))
        reservoir_insert(buf, e, rng)
    back = restore(snapshot(buf))
    assert back == buf


def test_empty_snapshot_round_trip():
    buf = restore(snapshot(ReplayBuffer(4)))
    assert buf.capacity == 4 and buf.entries == [] and buf.seen == 0


def test_corrupted_count_field_is_rejected():
    buf = ReplayBuffer(8, [entry(i) for i in range(3)], seen=3)
    data = bytearray(snapshot(buf))
    count_offset = 4 + 4 + 4 + 8
    for bad in (0, 2, 4, 9, 2**31):
        corrupt = bytearray(data)
        struct.pack_into("<I", corrupt, count_offset, bad)
        with pytest.raises(SnapshotDecodeError):
            restore(bytes(corrupt))
    with pytest.raises(SnapshotDecodeError):
        restore(bytes(data[:-1]))
    with pytest.raises(SnapshotDecodeError):
        restore(b"XXXX" + bytes(data[4:]))


def test_irs_config_rejects_bad_sigma():
    with pytest.raises(ValueError):
        IrsConfig(0.0, 10)


def test_gate_formula_matches_normal_density():
    cfg = IrsConfig(4.0, 20)
    for epoch in range(20):
        density = math.exp(-((epoch - 10) ** 2) / 32) / (4 * math.sqrt(2 * math.pi))
        assert gate_probability(epoch, cfg) == pytest.approx(density, rel=1e-14)
