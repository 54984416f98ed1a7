"""Coefficient matrices of the cross-fitted one-step and plug-in estimators.

Both estimators live in ``span{k(x_i, .) l(y_j, .)}``; row ``i`` of ``C``
collects every term contributed by observation ``i``, so that
``psibar = sum_ij C_ij k(x_i, .) l(y_j, .)``. ``E`` holds the plug-in part
(outcome-model differences without propensity weights).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .data import Dataset, FoldAssignment
from .exceptions import DomainError
from .nuisance import OutcomeWeights, PropensityFit

__all__ = [
    "CoefficientMatrices",
    "ipw_signs",
    "build_C",
    "build_E",
    "build_coefficients",
    "witness_eval",
    "witness_grid",
    "psibar_norm_sq",
    "dump_coefficients",
]


@dataclass(frozen=True)
class CoefficientMatrices:
    C: NDArray[np.float64]
    E: NDArray[np.float64]


def _check(dataset: Dataset, folds: FoldAssignment, weights: OutcomeWeights) -> None:
    if folds.n != dataset.n or weights.n != dataset.n:
        raise DomainError("dataset, folds and outcome weights disagree on n")


def ipw_signs(a: NDArray, w: NDArray) -> NDArray[np.float64]:
    """``a/w - (1-a)/(1-w)``."""
    a = np.asarray(a, dtype=np.float64)
    return a / w - (1.0 - a) / (1.0 - w)


def build_C(
    dataset: Dataset,
    folds: FoldAssignment,
    propensity: PropensityFit,
    weights: OutcomeWeights,
) -> NDArray[np.float64]:
    """One-step coefficient matrix.

    Diagonal: ``(a_i/w_i - (1-a_i)/(1-w_i)) / (2 n_s)``. Off-diagonal, on the
    training fold only: ``[(1 - a_i/w_i) beta_1(x_i)_j + ((1-a_i)/(1-w_i) - 1) beta_0(x_i)_j] / (2 n_s)``.
    """
    _check(dataset, folds, weights)
    n = dataset.n
    a = dataset.treatment.astype(np.float64)
    w = propensity.w
    if w.shape[0] != n:
        raise DomainError("propensity length differs from n")
    C = np.zeros((n, n))
    for s in (1, 2):
        rows = folds.indices(s)
        scale = 1.0 / (2.0 * folds.size(s))
        C[rows, rows] = scale * ipw_signs(a[rows], w[rows])
        gamma1 = scale * (1.0 - a[rows] / w[rows])
        gamma0 = scale * ((1.0 - a[rows]) / (1.0 - w[rows]) - 1.0)
        for arm, gam in ((1, gamma1), (0, gamma0)):
            blk = weights.blocks[(s, arm)]
            if blk.cols.shape[0]:
                C[np.ix_(rows, blk.cols)] += gam[:, None] * blk.H
    return C


def build_E(dataset: Dataset, folds: FoldAssignment, weights: OutcomeWeights) -> NDArray[np.float64]:
    """Plug-in coefficient matrix ``(beta_1(x_i)_j - beta_0(x_i)_j) / (2 n_s)``, zero diagonal."""
    _check(dataset, folds, weights)
    n = dataset.n
    E = np.zeros((n, n))
    for s in (1, 2):
        rows = folds.indices(s)
        scale = 1.0 / (2.0 * folds.size(s))
        for arm, sign in ((1, 1.0), (0, -1.0)):
            blk = weights.blocks[(s, arm)]
            if blk.cols.shape[0]:
                E[np.ix_(rows, blk.cols)] += sign * scale * blk.H
    return E


def build_coefficients(
    dataset: Dataset,
    folds: FoldAssignment,
    propensity: PropensityFit,
    weights: OutcomeWeights,
) -> CoefficientMatrices:
    return CoefficientMatrices(
        C=build_C(dataset, folds, propensity, weights),
        E=build_E(dataset, folds, weights),
    )


def witness_eval(C: NDArray, k_x: NDArray, l_y: NDArray) -> float:
    """``psibar(x, y) = k_x' C l_y``."""
    return float(np.asarray(k_x) @ np.asarray(C) @ np.asarray(l_y))


def witness_grid(C: NDArray, k_x: NDArray, l_grid: NDArray) -> NDArray[np.float64]:
    """Witness at one ``x`` and many ``y``; ``l_grid`` is ``(n, m)``, column per grid point."""
    return (np.asarray(k_x) @ np.asarray(C)) @ np.asarray(l_grid)


def psibar_norm_sq(C: NDArray, K: NDArray, L: NDArray) -> float:
    """``<C, K C L>_F``, the squared RKHS norm of the represented element."""
    return float(np.sum(C * (K @ C @ L)))


def dump_coefficients(coefs: CoefficientMatrices, directory: str | Path) -> tuple[Path, Path]:
    """Write ``C.csv`` and ``E.csv`` (no header, full precision) into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = (d / "C.csv", d / "E.csv")
    for mat, p in zip((coefs.C, coefs.E), paths):
        np.savetxt(p, mat, delimiter=",", fmt="%.17g")
    return paths
