"""Closed-form MMD and Wald-type statistics.

The Wald statistic uses the regularised inverse covariance
``((1 - eps) Sigma_n + eps I)^{-1}``. ``Sigma_n`` has rank at most ``2n + 4``
in the ``n^2``-dimensional span of the tensor features, so the inverse is
applied through a Woodbury correction with the low-rank factors ``T`` and
``U``. Their cross products ``U'T``, ``T'c`` and ``U'Gc`` are assembled from
``n x n`` matrices only, via

* ``x' G y = <X, K Y L>_F``
* ``S^b' G y = (D^b o K Y L) 1``
* ``S^a' G S^b = K o (D^a L D^b')``

where ``G = K (x) L`` and vectors are row-major vectorisations of ``n x n``
coefficient matrices. Nothing of size ``n^2`` is ever formed, except in
:func:`brute_force_statistic`, the dense reference implementation.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Literal

import numpy as np
import scipy.linalg as sla
from numpy.typing import NDArray

from .data import FoldAssignment
from .estimator import psibar_norm_sq
from .exceptions import DomainError, NumericalError

__all__ = [
    "EPS_FLOOR",
    "Statistic",
    "mmd_statistic",
    "epsilon_heuristic",
    "WaldPrecompute",
    "build_wald_precompute",
    "wald_statistic",
    "dense_factors",
    "brute_force_statistic",
]

EPS_FLOOR = 1e-8
NEG_CLAMP = 1e-8
BRUTE_FORCE_MAX_N = 40


def _clamp(value: float) -> float:
    return 0.0 if -NEG_CLAMP < value < 0.0 else float(value)


@dataclass(frozen=True)
class Statistic:
    kind: Literal["mmd", "wald", "kcd"]
    value: float
    n: int
    epsilon: float | None = None

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "value": self.value}
        if self.epsilon is not None:
            d["epsilon"] = self.epsilon
        return d


def mmd_statistic(C: NDArray, K: NDArray, L: NDArray, n: int | None = None) -> Statistic:
    """``n <C, K C L>_F``."""
    n = C.shape[0] if n is None else int(n)
    return Statistic("mmd", _clamp(n * psibar_norm_sq(C, K, L)), n)


def epsilon_heuristic(trace_ut: float, gamma: float = 1.0 / 3.0) -> float:
    """Trace-balanced regulariser ``eps = g t / (1 + g t)``, floored at ``EPS_FLOOR``.

    With ``t = tr(U'T)`` the total variance of the estimated influence
    function, this makes the identity weight ``eps`` equal to ``gamma``
    times the covariance weight ``(1 - eps) t``.
    """
    if not gamma > 0.0:
        raise DomainError(f"gamma must be positive, got {gamma}")
    t = max(float(trace_ut), 0.0)
    gt = gamma * t
    return max(gt / (1.0 + gt), EPS_FLOOR)


@dataclass(frozen=True)
class WaldPrecompute:
    """Everything the Wald statistic and its bootstrap need, built once in ``O(n^3)``.

    ``P`` and ``R`` are the ``(2n+4) x n`` maps ``xi -> T'c(xi)`` and
    ``xi -> U'G c(xi)`` for row-reweighted coefficients ``diag(xi) C``.
    ``Q`` is the symmetric ``n x n`` matrix with
    ``xi' Q xi = <Omega_n psi(xi), psi(xi)>``, so one bootstrap replicate is
    a single quadratic form.
    """

    epsilon: float
    M: NDArray[np.float64]
    H_S: tuple[NDArray[np.float64], NDArray[np.float64]]
    h_V: tuple[NDArray[np.float64], NDArray[np.float64]]
    h_W: tuple[NDArray[np.float64], NDArray[np.float64]]
    UT: NDArray[np.float64]
    lu: tuple[NDArray[np.float64], NDArray[np.int32]]
    trace_ut: float
    norm_sq: float
    Tc: NDArray[np.float64]
    UGc: NDArray[np.float64]
    Q: NDArray[np.float64]
    gamma: float | None = None

    @property
    def n(self) -> int:
        return int(self.M.shape[0])

    def P_times(self, xi: NDArray) -> NDArray[np.float64]:
        """``T' c(xi)``."""
        h1, h2 = self.H_S[0] @ xi, self.H_S[1] @ xi
        return np.concatenate([h1, h2, [self.h_V[0] @ xi, self.h_V[1] @ xi, self.h_W[0] @ xi, self.h_W[1] @ xi]])

    def R_times(self, xi: NDArray) -> NDArray[np.float64]:
        """``U' G c(xi)``."""
        h1, h2 = self.H_S[0] @ xi, self.H_S[1] @ xi
        return np.concatenate([h1, h2, [-h1.sum(), -h2.sum(), -(self.h_V[0] @ xi), -(self.h_V[1] @ xi)]])

    def solve(self, rhs: NDArray) -> NDArray[np.float64]:
        """``Z^{-1} rhs`` using the stored LU factors."""
        return sla.lu_solve(self.lu, rhs, check_finite=False)


def _fold_scalings(folds: FoldAssignment, n: int):
    if folds.n != n:
        raise DomainError("fold assignment length differs from n")
    out = []
    for s in (1, 2):
        idx = folds.indices(s)
        ns = idx.shape[0]
        out.append((idx, ns, np.sqrt(2.0 * ns), np.sqrt(2.0 / ns)))
    return out


def build_wald_precompute(
    C: NDArray,
    E: NDArray,
    K: NDArray,
    L: NDArray,
    folds: FoldAssignment,
    epsilon: float | None = None,
    gamma: float = 1.0 / 3.0,
) -> WaldPrecompute:
    """Assemble ``U'T``, factorise ``Z = eps I + (1 - eps) U'T`` and fold the bootstrap form.

    ``epsilon=None`` picks ``eps`` by :func:`epsilon_heuristic` from
    ``tr(U'T)`` and ``gamma``. Memory is ``O(n^2)``; the dominant costs are a
    dozen ``n x n`` products and one LU of size ``2n + 4``.
    """
    n = C.shape[0]
    if epsilon is not None and not (0.0 < epsilon <= 1.0):
        raise DomainError(f"epsilon must lie in (0, 1], got {epsilon}")
    scal = _fold_scalings(folds, n)

    CL = C @ L
    P = CL @ C.T
    P += P.T
    P *= 0.5
    M = K * P
    del P

    # Per fold: D = diag(mask * sqrt(2 n_s)) C,  V = diag(mask * sqrt(2 / n_s)) E,  W = D - n_s V.
    H_S, h_V, h_W, KVL, KWL, Drows, Vrows = [], [], [], [], [], [], []
    for idx, ns, dsc, vsc in scal:
        D_s = dsc * C[idx]  # nonzero rows of D^s
        V_s = vsc * E[idx]
        K_cols = K[:, idx]
        KD = K_cols @ D_s
        KV = K_cols @ V_s
        KW = KD - ns * KV
        del KD
        h_V.append(np.einsum("ij,ij->i", CL, KV))
        h_W.append(np.einsum("ij,ij->i", CL, KW))
        KVL.append(KV @ L)
        del KV
        KWL.append(KW @ L)
        del KW
        delta = np.zeros(n)
        delta[idx] = dsc
        H_S.append(delta[:, None] * M)
        Drows.append(D_s)
        Vrows.append(V_s)
    del CL

    m = 2 * n + 4
    UT = np.empty((m, m))
    iv, iw = 2 * n + 2, 2 * n + 2  # offsets of the v/w columns in U and T respectively
    for a, (idx_a, _, dsc_a, _) in enumerate(scal):
        row_S = slice(a * n, (a + 1) * n)
        delta_a = np.zeros(n)
        delta_a[idx_a] = dsc_a
        for b, (idx_b, _, dsc_b, _) in enumerate(scal):
            col_S = slice(b * n, (b + 1) * n)
            # S^a' G S^b = K o (D^a L D^b') = delta_a delta_b' o M
            blk = np.zeros((n, n))
            blk[np.ix_(idx_a, idx_b)] = (dsc_a * dsc_b) * M[np.ix_(idx_a, idx_b)]
            UT[row_S, col_S] = blk
            UT[2 * n + a, col_S] = -blk.sum(axis=0)  # -d^a' G S^b
            del blk
            # -v^a' G S^b = -[(D^b o K V^a L) 1]'
            rowvec = np.zeros(n)
            rowvec[idx_b] = -np.einsum("ij,ij->i", Drows[b], KVL[a][idx_b])
            UT[iv + a, col_S] = rowvec
        for b in range(2):
            idx_b_rows = scal[a][0]
            # S^a' G v^b and S^a' G w^b
            col = np.zeros(n)
            col[idx_b_rows] = np.einsum("ij,ij->i", Drows[a], KVL[b][idx_b_rows])
            UT[row_S, 2 * n + b] = col
            col = np.zeros(n)
            col[idx_b_rows] = np.einsum("ij,ij->i", Drows[a], KWL[b][idx_b_rows])
            UT[row_S, iw + b] = col
            # <X, K Y L>_F with X in rows of fold a only
            UT[2 * n + a, 2 * n + b] = -np.sum(Drows[a] * KVL[b][idx_a])
            UT[2 * n + a, iw + b] = -np.sum(Drows[a] * KWL[b][idx_a])
            UT[iv + a, 2 * n + b] = -np.sum(Vrows[a] * KVL[b][idx_a])
            UT[iv + a, iw + b] = -np.sum(Vrows[a] * KWL[b][idx_a])
    del KVL, KWL, Drows, Vrows

    trace_ut = float(np.trace(UT))
    eps = epsilon_heuristic(trace_ut, gamma) if epsilon is None else float(epsilon)

    Z = (1.0 - eps) * UT
    Z[np.diag_indices(m)] += eps
    with warnings.catch_warnings():
        warnings.simplefilter("error", sla.LinAlgWarning)
        try:
            lu = sla.lu_factor(Z, check_finite=False)
        except (sla.LinAlgError, sla.LinAlgWarning, ValueError) as exc:
            raise NumericalError(f"singular regularized covariance: {exc}") from None
    del Z
    if not np.all(np.isfinite(lu[0])) or np.any(np.diag(lu[0]) == 0.0):
        raise NumericalError("singular regularized covariance")

    Pm = np.vstack([H_S[0], H_S[1], h_V[0], h_V[1], h_W[0], h_W[1]])
    Rm = np.vstack([H_S[0], H_S[1], -H_S[0].sum(axis=0), -H_S[1].sum(axis=0), -h_V[0], -h_V[1]])
    ones = np.ones(n)
    Tc = Pm @ ones
    UGc = Rm @ ones
    if eps < 1.0:
        corr = Pm.T @ sla.lu_solve(lu, Rm, check_finite=False)
        del Pm, Rm
        Q = M - (1.0 - eps) * corr
        del corr
        Q /= eps
        Q += Q.T
        Q *= 0.5
    else:
        Q = M.copy()

    return WaldPrecompute(
        epsilon=eps,
        M=M,
        H_S=(H_S[0], H_S[1]),
        h_V=(h_V[0], h_V[1]),
        h_W=(h_W[0], h_W[1]),
        UT=UT,
        lu=lu,
        trace_ut=trace_ut,
        norm_sq=float(M.sum()),
        Tc=Tc,
        UGc=UGc,
        Q=Q,
        gamma=None if epsilon is not None else float(gamma),
    )


def wald_statistic(pre: WaldPrecompute, C: NDArray, K: NDArray, L: NDArray, n: int | None = None) -> Statistic:
    """``(n/eps) <C,KCL>_F - n (1-eps)/eps * (T'c)' Z^{-1} (U'Gc)``."""
    n = C.shape[0] if n is None else int(n)
    eps = pre.epsilon
    base = psibar_norm_sq(C, K, L)
    if eps == 1.0:
        return Statistic("wald", _clamp(n * base), n, eps)
    z = pre.solve(pre.UGc)
    value = (n / eps) * base - (n * (1.0 - eps) / eps) * float(pre.Tc @ z)
    return Statistic("wald", _clamp(value), n, eps)


def dense_factors(C: NDArray, E: NDArray, K: NDArray, L: NDArray, folds: FoldAssignment):
    """Materialise ``G = K (x) L``, ``T``, ``U`` and ``c = vec(C')`` at full ``n^2`` size.

    Row-major vectorisation throughout: entry ``(i, j)`` sits at ``i * n + j``.
    """
    n = C.shape[0]
    if n > BRUTE_FORCE_MAX_N:
        raise DomainError(f"dense n^2 materialisation limited to n <= {BRUTE_FORCE_MAX_N}, got {n}")
    G = np.kron(K, L)
    S_cols, d_cols, v_cols, w_cols = [], [], [], []
    for idx, ns, dsc, vsc in _fold_scalings(folds, n):
        mask = np.zeros(n)
        mask[idx] = 1.0
        D = (mask * dsc)[:, None] * C
        V = (mask * vsc)[:, None] * E
        W = D - ns * V
        S = np.zeros((n * n, n))
        for k in range(n):
            S[k * n:(k + 1) * n, k] = D[k]
        S_cols.append(S)
        d_cols.append(D.reshape(-1))
        v_cols.append(V.reshape(-1))
        w_cols.append(W.reshape(-1))
    T = np.column_stack([G @ S_cols[0], G @ S_cols[1]] + [G @ v for v in v_cols] + [G @ w for w in w_cols])
    U = np.column_stack([S_cols[0], S_cols[1]] + [-d for d in d_cols] + [-v for v in v_cols])
    return G, T, U, C.reshape(-1).copy()


def brute_force_statistic(
    C: NDArray,
    E: NDArray,
    K: NDArray,
    L: NDArray,
    folds: FoldAssignment,
    epsilon: float | None = None,
) -> float:
    """Reference statistic on the full ``n^2``-dimensional representation.

    ``epsilon=None`` gives the MMD statistic ``n c'Gc``. Otherwise returns
    ``n b'Gc`` with ``b' = c' [eps I + (1 - eps) T U']^{-1}``, solved densely
    (no Woodbury step). Only for ``n <= 40``.
    """
    n = C.shape[0]
    G, T, U, c = dense_factors(C, E, K, L, folds)
    if epsilon is None:
        return float(n * (c @ G @ c))
    A = epsilon * np.eye(n * n) + (1.0 - epsilon) * (T @ U.T)
    b = np.linalg.solve(A.T, c)
    return float(n * (b @ G @ c))
