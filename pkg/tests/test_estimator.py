import numpy as np
import pytest

from oracles import coefficients_loop, gauss, norm_sq_quadruple
from skcd.data import Dataset, FoldAssignment, make_folds
from skcd.estimator import (
    build_C,
    build_coefficients,
    build_E,
    dump_coefficients,
    psibar_norm_sq,
    witness_eval,
    witness_grid,
)
from skcd.kernels import KernelSpec, gram
from skcd.nuisance import ArmWeights, OutcomeWeights, PropensityFit, fit_outcome_weights, fit_propensity


def _instance(rng, n=8):
    a = rng.permutation(np.arange(n) % 2)
    ds = Dataset(rng.normal(size=(n, 2)), a, rng.normal(size=(n, 2)))
    folds = make_folds(n, a, int(rng.integers(100)))
    K = gram(ds.covariates, KernelSpec(1.1))
    w = rng.uniform(0.2, 0.8, size=n)
    prop = fit_propensity(ds, folds, "known", known=w)
    weights = fit_outcome_weights(ds, folds, K, 1e-3)
    return ds, folds, K, prop, weights


def test_matches_scalar_loop(rng):
    for _ in range(5):
        ds, folds, K, prop, weights = _instance(rng)
        C_ref, E_ref = coefficients_loop(ds.treatment, prop.w, folds.fold_of, K, 1e-3)
        np.testing.assert_allclose(build_C(ds, folds, prop, weights), C_ref, atol=1e-14, rtol=0)
        np.testing.assert_allclose(build_E(ds, folds, weights), E_ref, atol=1e-14, rtol=0)


def test_support_structure(rng):
    ds, folds, K, prop, weights = _instance(rng, 10)
    coefs = build_coefficients(ds, folds, prop, weights)
    C, E = coefs.C, coefs.E
    assert np.all(np.diag(E) == 0.0)
    for i in range(10):
        s = folds.fold_of[i]
        same = folds.fold_of == s
        same[i] = False
        assert np.all(C[i, same] == 0.0) and np.all(E[i, folds.fold_of == s] == 0.0)
        expected = (ds.treatment[i] / prop.w[i] - (1 - ds.treatment[i]) / (1 - prop.w[i])) / (2 * folds.size(s))
        assert C[i, i] == pytest.approx(expected, rel=1e-15)


def _empty_weights(n):
    e = np.empty(0, dtype=np.int64)
    blocks = {(s, a): ArmWeights(np.zeros((0, 0)), e, e) for s in (1, 2) for a in (0, 1)}
    return OutcomeWeights(blocks, 1e-3, n)


def test_diagonal_hand_arithmetic():
    # two units per fold, w = 0.5, no outcome-model terms: diagonal is +-(1/4)(2)
    ds = Dataset(np.arange(4.0)[:, None], np.array([1, 0, 1, 0]), np.arange(4.0)[:, None])
    folds = FoldAssignment(np.array([1, 1, 2, 2]))
    prop = PropensityFit(np.full(4, 0.5), "known")
    C = build_C(ds, folds, prop, _empty_weights(4))
    np.testing.assert_array_equal(C, np.diag([0.5, -0.5, 0.5, -0.5]))
    assert np.all(build_E(ds, folds, _empty_weights(4)) == 0.0)


def test_clipped_propensity_diagonal():
    ds = Dataset(np.arange(4.0)[:, None], np.array([1, 0, 1, 0]), np.arange(4.0)[:, None])
    folds = FoldAssignment(np.array([1, 1, 2, 2]))
    prop = fit_propensity(ds, folds, "known", known=np.array([1.0, 0.5, 0.5, 0.5]))
    C = build_C(ds, folds, prop, _empty_weights(4))
    assert C[0, 0] == pytest.approx(1 / (2 * 2), rel=1e-5)


def test_equal_arm_models_cancel_in_E(rng):
    ds, folds, K, prop, weights = _instance(rng)
    blocks = dict(weights.blocks)
    for s in (1, 2):
        blocks[(s, 0)] = blocks[(s, 1)]
    assert np.all(build_E(ds, folds, OutcomeWeights(blocks, 1e-3, 8)) == 0.0)


def test_witness(rng):
    C = np.diag([1.0, -1.0])
    assert witness_eval(C, np.array([1.0, 0.0]), np.array([1.0, 0.0])) == 1.0
    assert witness_eval(np.zeros((2, 2)), np.ones(2), np.ones(2)) == 0.0
    n = 8
    x, y = rng.normal(size=(n, 2)), rng.normal(size=(n, 2))
    C = rng.normal(size=(n, n))
    qx, qy = rng.normal(size=2), rng.normal(size=(3, 2))
    kx = np.array([gauss(xi, qx, 1.0) for xi in x])
    lg = np.array([[gauss(yj, q, 0.8) for q in qy] for yj in y])
    brute = [sum(C[i, j] * gauss(x[i], qx, 1.0) * gauss(y[j], q, 0.8) for i in range(n) for j in range(n)) for q in qy]
    np.testing.assert_allclose(witness_grid(C, kx, lg), brute, atol=1e-14)
    assert witness_eval(C, kx, lg[:, 0]) == pytest.approx(brute[0], abs=1e-14)


def test_norm_sq(rng):
    n = 8
    C = rng.normal(size=(n, n))
    assert psibar_norm_sq(np.zeros((n, n)), np.eye(n), np.eye(n)) == 0.0
    assert psibar_norm_sq(C, np.eye(n), np.eye(n)) == pytest.approx(np.sum(C**2), rel=1e-14)
    K = gram(rng.normal(size=(n, 2)), KernelSpec(1.0))
    L = gram(rng.normal(size=(n, 2)), KernelSpec(1.0))
    assert psibar_norm_sq(C, K, L) == pytest.approx(norm_sq_quadruple(C, K, L), rel=1e-12)
    assert psibar_norm_sq(C, K, L) >= -1e-10


def test_dump_round_trip(tmp_path, rng):
    ds, folds, K, prop, weights = _instance(rng)
    coefs = build_coefficients(ds, folds, prop, weights)
    pc, pe = dump_coefficients(coefs, tmp_path / "coefs")
    np.testing.assert_array_equal(np.loadtxt(pc, delimiter=","), coefs.C)
    np.testing.assert_array_equal(np.loadtxt(pe, delimiter=","), coefs.E)
