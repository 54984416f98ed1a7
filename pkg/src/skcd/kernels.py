"""Gaussian kernels and median-heuristic bandwidths."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Union

import numpy as np
from numpy.typing import NDArray
from scipy.spatial.distance import pdist

from .exceptions import DomainError

__all__ = [
    "KernelSpec",
    "median_heuristic",
    "sq_dists",
    "gram",
    "cross_gram",
    "kernel_vector",
]

MEDIAN_HEURISTIC = "median_heuristic"


def _as_points(points: NDArray) -> NDArray[np.float64]:
    p = np.asarray(points, dtype=np.float64)
    if p.ndim == 1:
        p = p[:, None]
    if p.ndim != 2:
        raise DomainError(f"points must be a matrix, got shape {p.shape}")
    return p


def median_heuristic(points: NDArray) -> float:
    """Lower median of all pairwise Euclidean distances.

    >>> median_heuristic([[0.0], [1.0], [3.0]])
    2.0
    """
    p = _as_points(points)
    if p.shape[0] < 2:
        raise DomainError("median heuristic needs at least 2 points")
    d = pdist(p)
    k = (d.shape[0] - 1) // 2
    med = float(np.partition(d, k)[k])
    if not med > 0.0:
        if np.all(d == 0.0):
            raise DomainError("degenerate bandwidth: all points identical")
        # More than half the pairs coincide; fall back to the smallest positive distance.
        med = float(d[d > 0].min())
    return med


@dataclass(frozen=True)
class KernelSpec:
    """Gaussian kernel ``exp(-|u - v|^2 / (2 sigma^2))``.

    ``bandwidth`` is either a positive float or ``"median_heuristic"``;
    call :meth:`resolve` with the reference points to get a concrete spec.
    """

    bandwidth: Union[float, Literal["median_heuristic"]] = MEDIAN_HEURISTIC
    family: Literal["gaussian"] = "gaussian"

    def __post_init__(self) -> None:
        if self.family != "gaussian":
            raise DomainError(f"unsupported kernel family {self.family!r}")
        if self.bandwidth != MEDIAN_HEURISTIC:
            bw = float(self.bandwidth)
            if not (bw > 0.0 and np.isfinite(bw)):
                raise DomainError(f"bandwidth must be positive, got {self.bandwidth!r}")
            object.__setattr__(self, "bandwidth", bw)

    @property
    def resolved(self) -> bool:
        return self.bandwidth != MEDIAN_HEURISTIC

    @property
    def sigma(self) -> float:
        if not self.resolved:
            raise DomainError("kernel bandwidth not resolved; call resolve(points) first")
        return float(self.bandwidth)

    def resolve(self, points: NDArray) -> KernelSpec:
        if self.resolved:
            return self
        return KernelSpec(bandwidth=median_heuristic(points), family=self.family)

    def scaled(self, c: float) -> KernelSpec:
        return KernelSpec(bandwidth=self.sigma * c, family=self.family)


def sq_dists(a: NDArray, b: NDArray) -> NDArray[np.float64]:
    """Squared Euclidean distances via ``|a|^2 + |b|^2 - 2 a.b``, clipped at 0."""
    a = _as_points(a)
    b = _as_points(b)
    if a.shape[1] != b.shape[1]:
        raise DomainError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    aa = np.einsum("ij,ij->i", a, a)
    bb = np.einsum("ij,ij->i", b, b)
    d = aa[:, None] + bb[None, :] - 2.0 * (a @ b.T)
    np.maximum(d, 0.0, out=d)
    return d


def gram(points: NDArray, spec: KernelSpec) -> NDArray[np.float64]:
    """Gram matrix; exactly symmetric with unit diagonal."""
    p = _as_points(points)
    d = sq_dists(p, p)
    d = 0.5 * (d + d.T)
    np.fill_diagonal(d, 0.0)
    return np.exp(d * (-0.5 / spec.sigma**2))


def cross_gram(a: NDArray, b: NDArray, spec: KernelSpec) -> NDArray[np.float64]:
    """Matrix of ``k(a_i, b_j)``."""
    return np.exp(sq_dists(a, b) * (-0.5 / spec.sigma**2))


def kernel_vector(points: NDArray, query: NDArray, spec: KernelSpec) -> NDArray[np.float64]:
    """Vector of ``k(p_i, query)`` over the rows of ``points``."""
    p = _as_points(points)
    q = np.asarray(query, dtype=np.float64).reshape(1, -1)
    return cross_gram(p, q, spec)[:, 0]
