import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fednpr.errors import MetricError
from fednpr.metrics import EvalRecord, balanced_accuracy, balanced_auc, federated_average


def brute_auc(score, positive):
    pos, neg = score[positive], score[~positive]
    wins = 0.0
    for p in pos:
        for n in neg:
            wins += 1.0 if p > n else 0.5 if p == n else 0.0
    return wins / (len(pos) * len(neg))


def random_instance(rng, n, C, ties):
    y = rng.integers(0, C, n)
    s = rng.random((n, C))
    if ties:
        s = np.round(s * 4) / 4
    return s, y


def record(bacc, bauc=0.5):
    return EvalRecord(0, 1, "test", bacc, bauc, np.array([bacc]), np.array([bauc]))


def test_bacc_fixtures():
    assert balanced_accuracy([0, 1, 2], [0, 1, 2], 3)[0] == 1.0
    assert balanced_accuracy([0, 0, 0, 0], [0, 0, 1, 1], 2)[0] == 0.5
    bacc, per = balanced_accuracy([0, 0, 1, 1], [0, 0, 0, 1], 3)
    assert bacc == 5 / 6
    assert per[0] == 2 / 3 and per[1] == 1.0 and np.isnan(per[2])
    with pytest.raises(MetricError):
        balanced_accuracy([], [], 2)


def test_bacc_invariant_to_class_duplication():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 3, 30)
    p = rng.integers(0, 3, 30)
    m = y == 1
    y2, p2 = np.concatenate([y, y[m]]), np.concatenate([p, p[m]])
    assert balanced_accuracy(p, y, 3)[0] == pytest.approx(balanced_accuracy(p2, y2, 3)[0], abs=1e-15)


def test_auc_fixtures():
    y = np.array([0, 1, 2, 1, 0])
    assert balanced_auc(np.eye(3)[y], y, 3)[0] == 1.0
    bauc, per, excl = balanced_auc(np.ones((5, 3)), y, 3)
    assert bauc == 0.5 and np.all(per == 0.5) and excl == []
    bauc, per, excl = balanced_auc(np.eye(3)[[0, 0, 1]], [0, 0, 1], 3)
    assert excl == [2] and np.isnan(per[2])


def test_auc_twenty_sample_oracle():
    rng = np.random.default_rng(7)
    s, y = random_instance(rng, 20, 3, ties=False)
    _, per, _ = balanced_auc(s, y, 3)
    for c in range(3):
        assert per[c] == pytest.approx(brute_auc(s[:, c], y == c), abs=1e-12)


def test_auc_oracle_hundred_instances():
    rng = np.random.default_rng(11)
    for i in range(100):
        n = int(rng.integers(2, 201))
        C = int(rng.integers(2, 6))
        s, y = random_instance(rng, n, C, ties=bool(i % 2))
        bauc, per, excl = balanced_auc(s, y, C)
        want = [brute_auc(s[:, c], y == c) for c in range(C) if c not in excl]
        for c in range(C):
            if c not in excl:
                assert per[c] == pytest.approx(brute_auc(s[:, c], y == c), abs=1e-12)
        if want:
            assert bauc == pytest.approx(np.mean(want), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.booleans())
def test_auc_rank_invariance_and_complement(seed, ties):
    rng = np.random.default_rng(seed)
    s, y = random_instance(rng, int(rng.integers(2, 60)), 3, ties)
    _, per, _ = balanced_auc(s, y, 3)
    _, per_t, _ = balanced_auc(np.exp(3 * s) + 7, y, 3)
    _, per_r, _ = balanced_auc(-s, y, 3)
    ok = np.isfinite(per)
    np.testing.assert_allclose(per_t[ok], per[ok], atol=1e-12)
    np.testing.assert_allclose(per_r[ok], 1 - per[ok], atol=1e-12)


def test_federated_average():
    assert federated_average([record(0.6), record(0.8)])[0] == pytest.approx(0.7)
    assert federated_average([record(0.42)] * 3) == (pytest.approx(0.42), pytest.approx(0.5))
    vals = [0.51, 0.62, 0.73, 0.44, 0.95, 0.66]
    hand = (0.51 + 0.62 + 0.73 + 0.44 + 0.95 + 0.66) / 6
    assert federated_average([record(v) for v in vals])[0] == pytest.approx(hand, abs=1e-15)
    assert federated_average([record(0.5, np.nan), record(0.5, 0.9)])[1] == 0.9
    with pytest.raises(MetricError):
        federated_average([])
