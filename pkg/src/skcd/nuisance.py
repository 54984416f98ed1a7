"""Cross-fitted nuisance models.

Propensities come from an L2-penalised logistic regression (damped Newton),
from user-supplied values, or from the treated fraction of the training
fold. Outcome models are kernel ridge regressions per treatment arm whose
prediction weights become the augmentation coefficients of the estimator.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Literal, Mapping

import numpy as np
import scipy.linalg as sla
from numpy.typing import NDArray

from .data import Dataset, FoldAssignment
from .exceptions import DomainError, NumericalError

__all__ = [
    "CLIP_DEFAULT",
    "PropensityFit",
    "LogisticFit",
    "fit_logistic",
    "fit_propensity",
    "ArmWeights",
    "OutcomeWeights",
    "krr_weights",
    "fit_outcome_weights",
]

log = logging.getLogger(__name__)

CLIP_DEFAULT = (1e-6, 1.0 - 1e-6)

PropensityMethod = Literal["known", "logistic", "constant"]


@dataclass(frozen=True)
class PropensityFit:
    """Cross-fitted propensities ``w_i``, each from a model trained on the other fold."""

    w: NDArray[np.float64]
    method: str
    clip: tuple[float, float] = CLIP_DEFAULT

    def __post_init__(self) -> None:
        w = np.array(self.w, dtype=np.float64, copy=True)
        w.setflags(write=False)
        object.__setattr__(self, "w", w)


@dataclass(frozen=True)
class LogisticFit:
    coef: NDArray[np.float64]  # intercept first
    loss_history: tuple[float, ...]
    converged: bool

    def predict(self, x: NDArray) -> NDArray[np.float64]:
        eta = self.coef[0] + np.asarray(x, dtype=np.float64) @ self.coef[1:]
        return _sigmoid(eta)


def _sigmoid(t: NDArray) -> NDArray[np.float64]:
    return np.exp(-np.logaddexp(0.0, -t))


def _logistic_loss(beta: NDArray, xd: NDArray, a: NDArray, penalty: float) -> float:
    eta = xd @ beta
    return float(np.mean(np.logaddexp(0.0, eta) - a * eta) + 0.5 * penalty * beta[1:] @ beta[1:])


def fit_logistic(
    x: NDArray,
    a: NDArray,
    penalty: float = 1e-4,
    max_iter: int = 100,
    tol: float = 1e-8,
) -> LogisticFit:
    """Penalised logistic regression with intercept by damped Newton.

    Minimises ``mean(log(1 + e^eta) - a * eta) + penalty/2 * |coef[1:]|^2``.
    Each step halves until the objective does not increase; if 60 halvings
    fail the fit is declared divergent.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    a = np.asarray(a, dtype=np.float64)
    m, p = x.shape
    xd = np.column_stack([np.ones(m), x])
    pen = np.full(p + 1, penalty)
    pen[0] = 0.0

    frac = np.clip(a.mean(), 1e-6, 1 - 1e-6)
    beta = np.zeros(p + 1)
    beta[0] = np.log(frac / (1 - frac))
    loss = _logistic_loss(beta, xd, a, penalty)
    history = [loss]
    converged = False
    for _ in range(max_iter):
        mu = _sigmoid(xd @ beta)
        grad = xd.T @ (mu - a) / m + pen * beta
        if np.max(np.abs(grad)) < tol:
            converged = True
            break
        wts = mu * (1.0 - mu)
        hess = (xd * wts[:, None]).T @ xd / m + np.diag(pen)
        hess[np.diag_indices_from(hess)] += 1e-12
        try:
            step = sla.solve(hess, grad, assume_a="pos")
        except (sla.LinAlgError, ValueError):
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        t = 1.0
        for _ in range(60):
            cand = beta - t * step
            cand_loss = _logistic_loss(cand, xd, a, penalty)
            if cand_loss <= loss:
                break
            t *= 0.5
        else:
            raise NumericalError("logistic Newton diverged: no decrease after full backtracking")
        beta, loss = cand, cand_loss
        history.append(loss)
    else:
        mu = _sigmoid(xd @ beta)
        grad = xd.T @ (mu - a) / m + pen * beta
        converged = bool(np.max(np.abs(grad)) < tol)
        if not converged:
            log.warning("logistic fit stopped after %d iterations (|grad|=%.3g)", max_iter, np.max(np.abs(grad)))
    return LogisticFit(coef=beta, loss_history=tuple(history), converged=converged)


def fit_propensity(
    dataset: Dataset,
    folds: FoldAssignment,
    method: PropensityMethod = "logistic",
    *,
    known: NDArray | None = None,
    penalty: float = 1e-4,
    covariates: list[int] | None = None,
    clip: tuple[float, float] = CLIP_DEFAULT,
    seed: int = 0,
) -> PropensityFit:
    """Cross-fitted propensity scores, clipped to ``clip``.

    ``covariates`` restricts the logistic model to a column subset (used to
    misspecify the model on purpose). ``seed`` is accepted for interface
    symmetry; all three methods are deterministic.
    """
    del seed
    n = dataset.n
    a = dataset.treatment
    lo, hi = clip
    if method == "known":
        if known is None:
            raise DomainError("method='known' requires propensity values")
        w = np.asarray(known, dtype=np.float64).reshape(-1)
        if w.shape[0] != n:
            raise DomainError(f"expected {n} known propensities, got {w.shape[0]}")
        if not np.all(np.isfinite(w)) or np.any(w < 0.0) or np.any(w > 1.0):
            raise DomainError("known propensities must lie in [0, 1]")
        return PropensityFit(np.clip(w, lo, hi), "known", clip)

    w = np.empty(n)
    x = dataset.covariates if covariates is None else dataset.subset_covariates(covariates)
    for s in (1, 2):
        eval_idx = folds.indices(s)
        train_idx = folds.indices(3 - s)
        if method == "constant":
            w[eval_idx] = a[train_idx].mean()
        elif method == "logistic":
            fit = fit_logistic(x[train_idx], a[train_idx], penalty=penalty)
            w[eval_idx] = fit.predict(x[eval_idx])
        else:
            raise DomainError(f"unknown propensity method {method!r}")
    return PropensityFit(np.clip(w, lo, hi), method, clip)


def _spd_solve(A: NDArray, B: NDArray) -> NDArray[np.float64]:
    """Solve ``A X = B`` for SPD ``A``; one jitter retry on Cholesky failure."""
    try:
        return sla.cho_solve(sla.cho_factor(A, lower=True, check_finite=False), B, check_finite=False)
    except sla.LinAlgError:
        jitter = 1e-10 * max(float(np.trace(A)) / max(A.shape[0], 1), 1.0)
        try:
            A2 = A + jitter * np.eye(A.shape[0])
            return sla.cho_solve(sla.cho_factor(A2, lower=True, check_finite=False), B, check_finite=False)
        except sla.LinAlgError:
            raise NumericalError("singular kernel ridge system despite ridge and jitter") from None


def krr_weights(k_query_train: NDArray, k_train: NDArray, lam: float) -> NDArray[np.float64]:
    """Prediction weights ``K_qJ (K_JJ + lam I)^{-1}`` without forming an inverse."""
    if not lam > 0.0:
        raise DomainError(f"ridge parameter must be positive, got {lam}")
    m = k_train.shape[0]
    if m == 0:
        return np.zeros((k_query_train.shape[0], 0))
    A = k_train + lam * np.eye(m)
    return _spd_solve(A, np.asarray(k_query_train).T).T


@dataclass(frozen=True)
class ArmWeights:
    """KRR weights for one (evaluation fold, arm) pair.

    ``H[k, m]`` is the weight of training unit ``cols[m]`` in the prediction
    at evaluation unit ``rows[k]``.
    """

    H: NDArray[np.float64]
    rows: NDArray[np.int64]
    cols: NDArray[np.int64]


@dataclass(frozen=True)
class OutcomeWeights:
    """Per-fold, per-arm KRR weights, keyed by ``(s, a)`` with ``s`` the evaluation fold."""

    blocks: Mapping[tuple[int, int], ArmWeights]
    lam: float
    n: int

    def beta(self, i: int, arm: int, fold_of: NDArray) -> NDArray[np.float64]:
        """Full length-``n`` coefficient vector of the arm-``arm`` model at ``x_i``."""
        blk = self.blocks[(int(fold_of[i]), arm)]
        out = np.zeros(self.n)
        k = int(np.searchsorted(blk.rows, i))
        out[blk.cols] = blk.H[k]
        return out


def fit_outcome_weights(
    dataset: Dataset,
    folds: FoldAssignment,
    K: NDArray,
    lam: float = 1e-3,
) -> OutcomeWeights:
    """Fit the four KRR systems (two folds times two arms) from the covariate Gram ``K``."""
    if not lam > 0.0:
        raise DomainError(f"ridge parameter must be positive, got {lam}")
    a = dataset.treatment
    blocks: dict[tuple[int, int], ArmWeights] = {}
    for s in (1, 2):
        rows = folds.indices(s)
        train = folds.indices(3 - s)
        for arm in (0, 1):
            cols = train[a[train] == arm]
            if cols.shape[0] == 0:
                raise DomainError(f"fold {3 - s} has no units with a={arm}")
            H = krr_weights(K[np.ix_(rows, cols)], K[np.ix_(cols, cols)], lam)
            blocks[(s, arm)] = ArmWeights(H=H, rows=rows, cols=cols)
    return OutcomeWeights(blocks=blocks, lam=float(lam), n=dataset.n)
