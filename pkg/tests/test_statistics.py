import tracemalloc

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import eif_covariance, norm_sq_quadruple, wald_eif
from skcd.data import FoldAssignment
from skcd.exceptions import DomainError
from skcd.kernels import KernelSpec, gram
from skcd.oracle import random_instance
from skcd.statistics import (
    EPS_FLOOR,
    brute_force_statistic,
    build_wald_precompute,
    dense_factors,
    epsilon_heuristic,
    mmd_statistic,
    wald_statistic,
)


def rel(a, b):
    return abs(a - b) / (1.0 + abs(b))


def test_mmd_trivial():
    assert mmd_statistic(np.zeros((3, 3)), np.eye(3), np.eye(3)).value == 0.0
    s = mmd_statistic(np.diag([1.0, -1.0]), np.eye(2), np.eye(2))
    assert (s.kind, s.value, s.n) == ("mmd", 4.0, 2)


def test_mmd_matches_quadruple_sum(rng):
    inst = random_instance(10, rng)
    ref = 10 * norm_sq_quadruple(inst.C, inst.K, inst.L)
    assert mmd_statistic(inst.C, inst.K, inst.L).value == pytest.approx(ref, rel=1e-10)


def test_brute_force_hand_case():
    folds = FoldAssignment(np.array([1, 2, 1, 2]))
    C = 0.1 * np.eye(4)
    assert brute_force_statistic(C, np.zeros((4, 4)), np.eye(4), np.eye(4), folds) == pytest.approx(0.16, rel=1e-14)


def test_brute_force_guard():
    n = 41
    folds = FoldAssignment(np.arange(n) % 2 + 1)
    with pytest.raises(DomainError):
        brute_force_statistic(np.zeros((n, n)), np.zeros((n, n)), np.eye(n), np.eye(n), folds)


def test_brute_force_agrees_with_mmd(rng):
    for _ in range(20):
        inst = random_instance(int(rng.integers(4, 11)), rng)
        ref = brute_force_statistic(inst.C, inst.E, inst.K, inst.L, inst.folds)
        assert mmd_statistic(inst.C, inst.K, inst.L).value == pytest.approx(ref, rel=1e-10)
        wald1 = brute_force_statistic(inst.C, inst.E, inst.K, inst.L, inst.folds, 1.0)
        assert wald1 == pytest.approx(ref, rel=1e-12)


def test_epsilon_heuristic():
    assert epsilon_heuristic(1.0, 1.0) == 0.5
    assert epsilon_heuristic(0.0) == EPS_FLOOR
    assert epsilon_heuristic(-1e-14) == EPS_FLOOR
    eps = epsilon_heuristic(3.0, 1.0 / 3.0)
    assert eps == pytest.approx(0.5)
    # identity weight equals gamma times the covariance weight
    assert eps == pytest.approx((1.0 / 3.0) * (1 - eps) * 3.0)
    with pytest.raises(DomainError):
        epsilon_heuristic(1.0, 0.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-6, 1e6), st.floats(1e-3, 10), st.floats(1e-3, 10))
def test_epsilon_increasing_in_gamma(t, g1, g2):
    lo, hi = sorted((g1, g2))
    assert epsilon_heuristic(t, lo) <= epsilon_heuristic(t, hi)
    assert 0 < epsilon_heuristic(t, lo) < 1


def test_ut_matches_dense_product(rng):
    for n in (4, 6, 9):
        inst = random_instance(n, rng)
        pre = build_wald_precompute(inst.C, inst.E, inst.K, inst.L, inst.folds, 0.3)
        _, T, U, _ = dense_factors(inst.C, inst.E, inst.K, inst.L, inst.folds)
        np.testing.assert_allclose(pre.UT, U.T @ T, atol=1e-10)


def test_trace_matches_eif_covariance(rng):
    for _ in range(5):
        inst = random_instance(int(rng.integers(4, 9)), rng)
        pre = build_wald_precompute(inst.C, inst.E, inst.K, inst.L, inst.folds, 0.5)
        n = inst.C.shape[0]
        F = eif_covariance(inst.C, inst.E, inst.folds.fold_of)
        G = np.kron(inst.K, inst.L)
        assert pre.trace_ut >= -1e-10
        assert pre.trace_ut == pytest.approx(np.trace(F @ G), rel=1e-10)
        _, T, U, _ = dense_factors(inst.C, inst.E, inst.K, inst.L, inst.folds)
        # the low-rank factors reproduce the EIF covariance: T U' = G F
        np.testing.assert_allclose(T @ U.T, G @ F, atol=1e-10 * (1 + np.abs(F).max()))
        assert n == pre.n


def test_zero_coefficients():
    n = 6
    folds = FoldAssignment(np.arange(n) % 2 + 1)
    K = np.eye(n)
    pre = build_wald_precompute(np.zeros((n, n)), np.zeros((n, n)), K, K, folds, 0.2)
    assert np.all(pre.UT == 0.0)
    assert wald_statistic(pre, np.zeros((n, n)), K, K).value == 0.0


@pytest.mark.parametrize("eps", [0.1, 0.3, 0.5, 1.0])
def test_wald_matches_oracles(rng, eps):
    for _ in range(6):
        inst = random_instance(int(rng.integers(4, 11)), rng)
        pre = build_wald_precompute(inst.C, inst.E, inst.K, inst.L, inst.folds, eps)
        value = wald_statistic(pre, inst.C, inst.K, inst.L).value
        assert rel(value, brute_force_statistic(inst.C, inst.E, inst.K, inst.L, inst.folds, eps)) < 1e-8
        assert rel(value, wald_eif(inst.C, inst.E, inst.K, inst.L, inst.folds.fold_of, eps)) < 1e-8
        assert value >= -1e-8


def test_wald_eps_one_is_mmd(rng):
    for _ in range(20):
        inst = random_instance(int(rng.integers(4, 11)), rng)
        pre = build_wald_precompute(inst.C, inst.E, inst.K, inst.L, inst.folds, 1.0)
        w = wald_statistic(pre, inst.C, inst.K, inst.L).value
        m = mmd_statistic(inst.C, inst.K, inst.L).value
        assert abs(w - m) <= 1e-12 * abs(m)


def test_heuristic_epsilon_used_by_default(rng):
    inst = random_instance(8, rng)
    pre = build_wald_precompute(inst.C, inst.E, inst.K, inst.L, inst.folds)
    assert pre.epsilon == pytest.approx(epsilon_heuristic(pre.trace_ut, 1 / 3))
    assert wald_statistic(pre, inst.C, inst.K, inst.L).epsilon == pre.epsilon
    with pytest.raises(DomainError):
        build_wald_precompute(inst.C, inst.E, inst.K, inst.L, inst.folds, 0.0)


def test_M_is_psd(rng):
    inst = random_instance(10, rng)
    pre = build_wald_precompute(inst.C, inst.E, inst.K, inst.L, inst.folds, 0.5)
    for _ in range(50):
        v = rng.normal(size=10)
        assert v @ pre.M @ v >= -1e-10
    np.testing.assert_allclose(pre.M, inst.K * (inst.C @ inst.L @ inst.C.T), atol=1e-14)


@pytest.mark.slow
def test_precompute_memory_budget():
    # Peak allocation must stay a small multiple of n^2 doubles; an object
    # with n^2 rows would need at least n^2 (2n + 4) doubles.
    n = 2000
    rng = np.random.default_rng(1)
    folds = FoldAssignment(np.arange(n) % 2 + 1)
    K = gram(rng.normal(size=(n, 2)), KernelSpec(1.0))
    L = gram(rng.normal(size=(n, 2)), KernelSpec(1.0))
    C = rng.normal(size=(n, n)) / n
    E = rng.normal(size=(n, n)) / n
    tracemalloc.start()
    build_wald_precompute(C, E, K, L, folds)
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    assert peak < 32 * n * n * 8
