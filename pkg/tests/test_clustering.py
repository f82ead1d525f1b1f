import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fednpr.clustering import (
    PrototypeBank, SinkhornConfig, cluster_client, harden_assignment, init_prototypes, normalize_rows,
    normalize_rows_backward, sinkhorn_assign, update_prototypes,
)
from fednpr.errors import ConvergenceError, DegenerateFeatureError, EmptyClusterError

from helpers import central_diff, entropic_2x2_oracle, lp_2x2_oracle, rel_err


def unit(rng, n, d):
    return normalize_rows(rng.standard_normal((n, d)))


def test_normalize_rows_examples():
    np.testing.assert_allclose(normalize_rows(np.array([[3.0, 4.0]])), [[0.6, 0.8]], atol=1e-15)
    rng = np.random.default_rng(0)
    U = unit(rng, 5, 3)
    np.testing.assert_allclose(normalize_rows(U), U, rtol=0, atol=1e-15)
    R = normalize_rows(rng.standard_normal((10, 16)))
    np.testing.assert_allclose(np.linalg.norm(R, axis=1), 1.0, atol=1e-12)


def test_normalize_rows_degenerate():
    with pytest.raises(DegenerateFeatureError):
        normalize_rows(np.array([[1.0, 0.0], [0.0, 1e-13]]))


def test_normalize_rows_backward_finite_diff():
    rng = np.random.default_rng(1)
    Z = rng.standard_normal((4, 5))
    G = rng.standard_normal((4, 5))
    analytic = normalize_rows_backward(Z, G)
    numeric = central_diff(lambda: np.sum(normalize_rows(Z) * G), Z)
    assert rel_err(analytic, numeric, floor=1e-5) <= 1e-4


def test_single_cluster_takes_everything():
    rng = np.random.default_rng(2)
    Z = unit(rng, 7, 4)
    Q, scaling = sinkhorn_assign(Z, unit(rng, 1, 4).T)
    np.testing.assert_allclose(Q, np.ones((7, 1)), atol=1e-12)
    assert np.all(scaling.row_scaling > 0) and np.all(scaling.col_scaling > 0)


def test_orthogonal_2x2_is_identity():
    Z = np.eye(2, 3)
    Q, _ = sinkhorn_assign(Z, Z.T.copy())
    np.testing.assert_allclose(Q, np.eye(2), atol=1e-3)
    np.testing.assert_allclose(Q, lp_2x2_oracle(Z @ Z.T), atol=1e-3)
    np.testing.assert_allclose(Q, entropic_2x2_oracle(Z @ Z.T, 0.05), atol=1e-3)


def test_random_marginals_64x4():
    rng = np.random.default_rng(3)
    Q, _ = sinkhorn_assign(unit(rng, 64, 8), unit(rng, 4, 8).T)
    assert np.all(Q >= 0)
    np.testing.assert_allclose(Q.sum(axis=1), 1.0, atol=1e-6)
    np.testing.assert_allclose(Q.sum(axis=0), 16.0, atol=1e-6)


def test_log_domain_agrees_with_linear():
    rng = np.random.default_rng(4)
    Z, P = unit(rng, 20, 5), unit(rng, 3, 5).T
    Q_lin, s_lin = sinkhorn_assign(Z, P, SinkhornConfig(epsilon=0.05))
    assert not s_lin.log_domain
    # epsilon tiny enough that exp underflows: the solver must switch domains and still meet the marginals
    Q_log, s_log = sinkhorn_assign(Z, P, SinkhornConfig(epsilon=0.002, max_iters=20000))
    assert s_log.log_domain
    np.testing.assert_allclose(Q_log.sum(axis=1), 1.0, atol=1e-6)
    np.testing.assert_allclose(Q_log.sum(axis=0), 20 / 3, atol=1e-6)
    # and with a moderate epsilon the two domains give the same plan
    from fednpr import clustering
    Q_forced, _ = clustering._sinkhorn_log((Z @ P) / 0.05 - ((Z @ P) / 0.05).max(), 20 / 3, SinkhornConfig())
    np.testing.assert_allclose(Q_forced, Q_lin, atol=1e-6)


def test_convergence_error_reports_residual():
    rng = np.random.default_rng(5)
    with pytest.raises(ConvergenceError) as info:
        sinkhorn_assign(unit(rng, 50, 4), unit(rng, 5, 4).T, SinkhornConfig(max_iters=1, marginal_tol=1e-20))
    assert info.value.residual > 1e-18


def test_update_prototypes_hard_assignment_gives_means():
    rng = np.random.default_rng(6)
    Z = unit(rng, 6, 3)
    Q = np.zeros((6, 2))
    Q[[0, 1, 2], 0] = 1
    Q[[3, 4, 5], 1] = 1
    P, mass = update_prototypes(Z, Q)
    m0, m1 = Z[:3].mean(0), Z[3:].mean(0)
    np.testing.assert_allclose(P[:, 0], m0 / np.linalg.norm(m0), atol=1e-15)
    np.testing.assert_allclose(P[:, 1], m1 / np.linalg.norm(m1), atol=1e-15)
    np.testing.assert_array_equal(mass, [3, 3])


def test_update_prototypes_single_feature():
    z = normalize_rows(np.array([[1.0, 2.0, 2.0]]))
    P, mass = update_prototypes(z, np.ones((1, 1)))
    np.testing.assert_allclose(P[:, 0], z[0], atol=1e-15)


def test_update_prototypes_matches_double_loop():
    rng = np.random.default_rng(7)
    Z = rng.standard_normal((9, 4))
    Q = rng.random((9, 3))
    P, mass = update_prototypes(Z, Q)
    raw = np.zeros((4, 3))
    for k in range(3):
        Nk = 0.0
        for j in range(9):
            Nk += Q[j, k]
            raw[:, k] += Q[j, k] * Z[j]
        raw[:, k] /= Nk
        assert mass[k] == pytest.approx(Nk, rel=1e-14)
    np.testing.assert_allclose(P * np.linalg.norm(raw, axis=0), raw, rtol=0, atol=1e-12)


def test_update_prototypes_empty_cluster():
    with pytest.raises(EmptyClusterError):
        update_prototypes(np.eye(3), np.array([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]]))


def test_init_prototypes_cases():
    rng = np.random.default_rng(8)
    Z = unit(rng, 10, 4)
    Y = np.array([0] * 6 + [1] * 3 + [2] * 1)
    bank = init_prototypes(Z, Y, K=1, n_classes=4, rng=rng, perturbation=0.0)
    m = Z[:6].mean(0)
    np.testing.assert_allclose(bank.prototypes[0][:, 0], m / np.linalg.norm(m), atol=1e-15)
    assert bank.prototypes[3].shape == (4, 0)

    bank = init_prototypes(Z, Y, K=4, n_classes=4, rng=rng)
    assert [bank.k(c) for c in range(4)] == [4, 3, 1, 0]
    assert bank.n_columns == 8
    np.testing.assert_allclose(np.linalg.norm(bank.prototypes[0], axis=0), 1.0, atol=1e-12)


def test_init_prototypes_separated_classes():
    rng = np.random.default_rng(9)
    Z = normalize_rows(np.concatenate([
        np.array([5.0, 0, 0, 0]) + rng.standard_normal((20, 4)),
        np.array([0, 5.0, 0, 0]) + rng.standard_normal((20, 4)),
    ]))
    Y = np.repeat([0, 1], 20)
    bank = init_prototypes(Z, Y, K=3, n_classes=2, rng=rng)
    intra = min((bank.prototypes[c].T @ bank.prototypes[c]).min() for c in (0, 1))
    inter = (bank.prototypes[0].T @ bank.prototypes[1]).max()
    assert intra > inter


def test_cluster_client_fixed_point_on_frozen_features():
    rng = np.random.default_rng(10)
    centers = rng.standard_normal((6, 8)) * 3
    Z = np.concatenate([centers[i] + rng.standard_normal((15, 8)) * 0.3 for i in range(6)])
    Y = np.repeat([0, 0, 1, 1, 2, 2], 15)
    bank = cluster_client(Z, Y, None, K=2, n_classes=3, rng=rng)
    drift = np.inf
    for _ in range(200):
        nxt = cluster_client(Z, Y, bank, K=2, n_classes=3, rng=rng)
        drift = max(np.abs(nxt.prototypes[c] - bank.prototypes[c]).max() for c in range(3))
        bank = nxt
        if drift < 1e-6:
            break
    assert drift < 1e-6


def test_cluster_client_missing_class_and_full_width():
    rng = np.random.default_rng(11)
    Z = rng.standard_normal((40, 5))
    Y = np.repeat([0, 1, 3, 3], 10)
    bank = cluster_client(Z, Y, None, K=4, n_classes=4, rng=rng)
    assert bank.k(2) == 0
    assert bank.n_columns == 12

    Y = np.repeat([0, 1, 2, 3], 10)
    bank = cluster_client(Z, Y, None, K=4, n_classes=4, rng=rng)
    assert bank.n_columns == 4 * 4  # K x C when every class has >= K samples


def test_cluster_client_hardened_recovers_empty_clusters():
    rng = np.random.default_rng(12)
    Z = np.tile([1.0, 0.0, 0.0], (5, 1)) + 1e-3 * rng.standard_normal((5, 3))
    Y = np.zeros(5, dtype=int)
    bank = cluster_client(Z, Y, None, K=3, n_classes=1, config=SinkhornConfig(harden=True), rng=rng)
    np.testing.assert_allclose(np.linalg.norm(bank.prototypes[0], axis=0), 1.0, atol=1e-12)
    assert np.isfinite(bank.prototypes[0]).all()


def test_harden_assignment_rows_one_hot():
    Q = np.array([[0.2, 0.8], [0.5, 0.5], [0.9, 0.1]])
    np.testing.assert_array_equal(harden_assignment(Q), [[0, 1], [1, 0], [1, 0]])


problem = st.tuples(st.integers(4, 128), st.integers(1, 8), st.integers(2, 16), st.integers(0, 2**31 - 1))


@settings(max_examples=60, deadline=None)
@given(problem)
def test_sinkhorn_marginals_property(p):
    n, k, d, seed = p
    rng = np.random.default_rng(seed)
    Q, s = sinkhorn_assign(unit(rng, n, d), unit(rng, k, d).T)
    assert np.all(Q >= 0)
    assert np.max(np.abs(Q.sum(axis=1) - 1)) < 1e-6
    assert np.max(np.abs(Q.sum(axis=0) - n / k)) < 1e-6
    _, mass = update_prototypes(unit(rng, n, d), Q)
    assert abs(mass.sum() - n) <= 1e-6 * k


@settings(max_examples=40, deadline=None)
@given(problem)
def test_permutation_equivariance(p):
    n, k, d, seed = p
    rng = np.random.default_rng(seed)
    Z, P = unit(rng, n, d), unit(rng, k, d).T
    perm = rng.permutation(n)
    Q, _ = sinkhorn_assign(Z, P)
    Qp, _ = sinkhorn_assign(Z[perm], P)
    np.testing.assert_allclose(Qp, Q[perm], atol=1e-9)
    P1, _ = update_prototypes(Z, Q)
    P2, _ = update_prototypes(Z[perm], Qp)
    np.testing.assert_allclose(P1, P2, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(problem, st.floats(1e-3, 1e3))
def test_scale_robustness(p, scale):
    n, k, d, seed = p
    rng = np.random.default_rng(seed)
    Z, P = rng.standard_normal((n, d)), unit(rng, k, d).T
    Q1, _ = sinkhorn_assign(normalize_rows(Z), P)
    Q2, _ = sinkhorn_assign(normalize_rows(scale * Z), P)
    np.testing.assert_allclose(Q1, Q2, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_bank_refresh_keeps_unit_prototypes(seed):
    rng = np.random.default_rng(seed)
    Z = rng.standard_normal((60, 6))
    Y = rng.integers(0, 4, 60)
    bank = cluster_client(Z, Y, None, K=3, n_classes=4, rng=rng)
    bank = cluster_client(Z, Y, bank, K=3, n_classes=4, rng=rng)
    for c in range(4):
        if bank.k(c):
            np.testing.assert_allclose(np.linalg.norm(bank.prototypes[c], axis=0), 1.0, atol=1e-12)
        assert bank.k(c) == min(3, int((Y == c).sum()))
