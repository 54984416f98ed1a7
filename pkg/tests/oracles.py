"""Slow, literal reference implementations used only by the tests.

Each one follows the defining formula with explicit loops or dense
``n^2``-dimensional algebra and shares no code with the package beyond
data containers.
"""

from __future__ import annotations

import math

import numpy as np


def gauss(u, v, sigma):
    u, v = np.atleast_1d(u), np.atleast_1d(v)
    return math.exp(-float(np.sum((u - v) ** 2)) / (2.0 * sigma**2))


def gram_loop(points, sigma):
    p = np.asarray(points, dtype=float).reshape(len(points), -1)
    m = p.shape[0]
    return np.array([[gauss(p[i], p[j], sigma) for j in range(m)] for i in range(m)])


def krr_inverse(K, rows, cols, lam):
    """``K[rows, cols] @ inv(K[cols, cols] + lam I)`` with an explicit inverse."""
    A = K[np.ix_(cols, cols)] + lam * np.eye(len(cols))
    return K[np.ix_(rows, cols)] @ np.linalg.inv(A)


def coefficients_loop(a, w, fold_of, K, lam):
    """One-step (``C``) and plug-in (``E``) coefficients entry by entry."""
    n = len(a)
    C = np.zeros((n, n))
    E = np.zeros((n, n))
    sizes = {s: int(np.sum(fold_of == s)) for s in (1, 2)}
    for i in range(n):
        s = fold_of[i]
        r = 3 - s
        scale = 1.0 / (2.0 * sizes[s])
        beta = {}
        for arm in (0, 1):
            J = [j for j in range(n) if fold_of[j] == r and a[j] == arm]
            b = np.zeros(n)
            if J:
                b[J] = krr_inverse(K, [i], J, lam)[0]
            beta[arm] = b
        for j in range(n):
            if j == i:
                C[i, j] = scale * (a[i] / w[i] - (1 - a[i]) / (1 - w[i]))
            else:
                C[i, j] = scale * ((1 - a[i] / w[i]) * beta[1][j] + ((1 - a[i]) / (1 - w[i]) - 1) * beta[0][j])
                E[i, j] = scale * (beta[1][j] - beta[0][j])
    return C, E


def norm_sq_quadruple(C, K, L):
    """``sum c_ij c_i'j' k(x_i, x_i') l(y_j, y_j')`` by four nested loops."""
    n = C.shape[0]
    total = 0.0
    for i in range(n):
        for j in range(n):
            if C[i, j] == 0.0:
                continue
            for ii in range(n):
                for jj in range(n):
                    total += C[i, j] * C[ii, jj] * K[i, ii] * L[j, jj]
    return total


def eif_vectors(C, E, fold_of):
    """Vectorised estimated influence functions ``f_k`` (row-major, length ``n^2``) and their fold sizes.

    For ``k`` in fold ``s``: ``f_k = 2 n_s vec(e_k C[k, :]) - 2 vec(E restricted to fold-s rows)``.
    """
    n = C.shape[0]
    out = []
    for s in (1, 2):
        idx = np.flatnonzero(fold_of == s)
        ns = len(idx)
        Es = np.zeros((n, n))
        Es[idx] = E[idx]
        for k in idx:
            Fk = -2.0 * Es
            Fk[k] += 2.0 * ns * C[k]
            out.append((Fk.reshape(-1), ns))
    return out


def eif_covariance(C, E, fold_of):
    """Coefficient-space covariance ``sum_s (1/(2 n_s)) sum_{k in s} f_k f_k'``."""
    n = C.shape[0]
    F = np.zeros((n * n, n * n))
    for f, ns in eif_vectors(C, E, fold_of):
        F += np.outer(f, f) / (2.0 * ns)
    return F


def wald_eif(C, E, K, L, fold_of, eps):
    """``n <psi, ((1-eps) Sigma + eps I)^{-1} psi>`` with ``Sigma`` built from the EIF expansion.

    In coefficient space the operator ``Sigma`` acts as ``F G`` with ``G = K (x) L``.
    """
    n = C.shape[0]
    G = np.kron(K, L)
    F = eif_covariance(C, E, fold_of)
    c = C.reshape(-1)
    b = np.linalg.solve(eps * np.eye(n * n) + (1 - eps) * F @ G, c)
    return float(n * c @ G @ b)


def sigma_evaluation(C, E, fold_of, k_x, l_y):
    """``<Lambda_{x,y}, Sigma Lambda_{x,y}>`` from the EIF expansion."""
    kl = np.outer(k_x, l_y).reshape(-1)
    return sum((f @ kl) ** 2 / (2.0 * ns) for f, ns in eif_vectors(C, E, fold_of))


def kcd_expansion(x, a, y, lam, sx1, sx0, sy):
    """``(1/n) sum_i |nu_1(x_i) - nu_0(x_i)|^2`` by explicit coefficient expansion."""
    n = len(a)
    L = gram_loop(y, sy)
    coef = np.zeros((n, n))  # row i: coefficients of nu_1(x_i) - nu_0(x_i) on l(y_j, .)
    for arm, sigma, sign in ((1, sx1, 1.0), (0, sx0, -1.0)):
        J = [j for j in range(n) if a[j] == arm]
        KJ = gram_loop(x[J], sigma)
        inv = np.linalg.inv(KJ + lam * np.eye(len(J)))
        for i in range(n):
            kv = np.array([gauss(x[i], x[j], sigma) for j in J])
            coef[i, J] += sign * (kv @ inv)
    return sum(coef[i] @ L @ coef[i] for i in range(n)) / n
