"""Small random instances and the closed-form versus dense comparison suite."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .data import Dataset, FoldAssignment, make_folds
from .estimator import CoefficientMatrices, build_coefficients
from .kernels import KernelSpec, gram
from .nuisance import fit_outcome_weights, fit_propensity
from .statistics import (
    brute_force_statistic,
    build_wald_precompute,
    dense_factors,
    mmd_statistic,
    wald_statistic,
)

__all__ = ["Instance", "random_instance", "relative_error", "oracle_check"]


@dataclass(frozen=True)
class Instance:
    dataset: Dataset
    folds: FoldAssignment
    K: NDArray[np.float64]
    L: NDArray[np.float64]
    coefs: CoefficientMatrices

    @property
    def C(self) -> NDArray[np.float64]:
        return self.coefs.C

    @property
    def E(self) -> NDArray[np.float64]:
        return self.coefs.E


def random_instance(n: int, rng: np.random.Generator, d_x: int = 2, d_y: int = 2, lam: float = 1e-3) -> Instance:
    """Gaussian covariates and outcomes, balanced treatment, random propensities in ``[0.2, 0.8]``.

    Coefficients come from the real estimator pipeline, so the instance has
    the same sparsity and scaling structure as a fitted dataset.
    """
    x = rng.normal(size=(n, d_x))
    y = rng.normal(size=(n, d_y))
    a = rng.permutation(np.arange(n) % 2)
    ds = Dataset(covariates=x, treatment=a, outcomes=y)
    folds = make_folds(n, a, int(rng.integers(2**31)))
    K = gram(x, KernelSpec().resolve(x))
    L = gram(y, KernelSpec().resolve(y))
    prop = fit_propensity(ds, folds, "known", known=rng.uniform(0.2, 0.8, size=n))
    coefs = build_coefficients(ds, folds, prop, fit_outcome_weights(ds, folds, K, lam))
    return Instance(ds, folds, K, L, coefs)


def relative_error(value: float, reference: float) -> float:
    return abs(value - reference) / max(abs(reference), 1e-300) if reference != 0.0 else abs(value)


def oracle_check(instances: int = 50, seed: int = 0, epsilons=(0.1, 0.5, 1.0)) -> dict:
    """Closed-form statistics, ``U'T`` and fast bootstrap replicates against the dense oracle.

    Returns the worst relative error of each comparison over all instances.
    """
    from .inference import bootstrap_replicate_mmd, bootstrap_replicate_wald

    rng = np.random.default_rng(seed)
    worst = {"mmd": 0.0, "wald": 0.0, "ut": 0.0, "bootstrap_mmd": 0.0, "bootstrap_wald": 0.0}
    for k in range(instances):
        n = int(rng.integers(4, 11))
        inst = random_instance(n, rng)
        C, E, K, L, folds = inst.C, inst.E, inst.K, inst.L, inst.folds
        worst["mmd"] = max(worst["mmd"], relative_error(mmd_statistic(C, K, L).value, brute_force_statistic(C, E, K, L, folds)))
        eps = float(epsilons[k % len(epsilons)])
        pre = build_wald_precompute(C, E, K, L, folds, eps)
        ref = brute_force_statistic(C, E, K, L, folds, eps)
        worst["wald"] = max(worst["wald"], relative_error(wald_statistic(pre, C, K, L).value, ref))

        G, T, U, _ = dense_factors(C, E, K, L, folds)
        ut = U.T @ T
        worst["ut"] = max(worst["ut"], float(np.max(np.abs(pre.UT - ut)) / (1.0 + np.max(np.abs(ut)))))

        xi = rng.multinomial(n, np.full(n, 1.0 / n)) - 1.0
        Cb = xi[:, None] * C
        fast = bootstrap_replicate_mmd(pre.M, xi, n)
        worst["bootstrap_mmd"] = max(worst["bootstrap_mmd"], relative_error(fast, mmd_statistic(Cb, K, L).value))
        cb = Cb.reshape(-1)
        A = eps * np.eye(n * n) + (1.0 - eps) * (T @ U.T)
        naive = float(n * (np.linalg.solve(A.T, cb) @ G @ cb))
        worst["bootstrap_wald"] = max(worst["bootstrap_wald"], relative_error(bootstrap_replicate_wald(pre, xi, n), naive))
    worst["max"] = max(worst.values())
    worst["instances"] = instances
    worst["seed"] = seed
    return worst
