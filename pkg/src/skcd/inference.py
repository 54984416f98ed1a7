"""Multiplier-bootstrap SKCD test, confidence bands and the Monte Carlo harness.

The bootstrap never refits anything. A replicate reweights the rows of the
coefficient matrix by zero-sum multinomial multipliers ``xi`` and evaluates
the statistic of ``diag(xi) C``, which for both statistics reduces to the
quadratic form ``n xi' Q xi`` with a precomputed ``n x n`` matrix ``Q``.
"""

from __future__ import annotations

import csv
import functools
import json
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Literal, Sequence, TextIO

import numpy as np
from numpy.typing import NDArray

from .data import Dataset, FoldAssignment, make_folds, simulate_fig1
from .estimator import CoefficientMatrices, build_coefficients, witness_grid
from .exceptions import DomainError
from .kernels import KernelSpec, cross_gram, gram, kernel_vector
from .nuisance import PropensityFit, fit_outcome_weights, fit_propensity
from .statistics import (
    Statistic,
    WaldPrecompute,
    build_wald_precompute,
    mmd_statistic,
    wald_statistic,
)

__all__ = [
    "TestConfig",
    "TestResult",
    "BandResult",
    "SKCDFit",
    "MonteCarloResult",
    "replicate_rng",
    "draw_multipliers",
    "multiplier_matrix",
    "bootstrap_replicate_mmd",
    "bootstrap_replicate_wald",
    "bootstrap_values",
    "quantile",
    "exceedance",
    "fit_skcd",
    "skcd_test",
    "mmd_slice_gram",
    "mmd_slice_band",
    "global_band_width",
    "global_band",
    "wilson_interval",
    "monte_carlo_rejection_rate",
]

log = logging.getLogger(__name__)

CHUNK = 128  # replicates per work item; fixed so results do not depend on thread count
_BOOT_TAG = 0xB007
_SLICE_TAG = 0x511CE
WILSON_Z = 1.959964


@dataclass(frozen=True)
class TestConfig:
    """Everything that determines a test run besides the data.

    ``epsilon=None`` selects the Wald regulariser from ``gamma`` by the trace
    heuristic. ``propensity_covariates`` and ``outcome_covariates`` restrict
    the corresponding nuisance model to a column subset (deliberate
    misspecification); the test kernel always sees every covariate.
    """

    __test__ = False  # not a pytest class

    stat: Literal["mmd", "wald"] = "mmd"
    propensity: Literal["logistic", "known", "constant"] = "logistic"
    lam: float = 1e-3
    gamma: float = 1.0 / 3.0
    epsilon: float | None = None
    B: int = 1000
    alpha: float = 0.05
    seed: int = 0
    threads: int = 1
    kernel_x: KernelSpec = field(default_factory=KernelSpec)
    kernel_y: KernelSpec = field(default_factory=KernelSpec)
    propensity_covariates: tuple[int, ...] | None = None
    outcome_covariates: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        if self.stat not in ("mmd", "wald"):
            raise DomainError(f"unknown statistic {self.stat!r}")
        if not 0.0 < self.alpha < 1.0:
            raise DomainError(f"alpha must lie in (0, 1), got {self.alpha}")
        if int(self.B) < 1:
            raise DomainError(f"B must be at least 1, got {self.B}")
        if not self.lam > 0.0:
            raise DomainError(f"lambda must be positive, got {self.lam}")
        if not self.gamma > 0.0:
            raise DomainError(f"gamma must be positive, got {self.gamma}")
        if self.epsilon is not None and not 0.0 < self.epsilon <= 1.0:
            raise DomainError(f"epsilon must lie in (0, 1], got {self.epsilon}")
        if self.threads < 0:
            raise DomainError("threads must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kernel_x"] = {"family": self.kernel_x.family, "bandwidth": self.kernel_x.bandwidth}
        d["kernel_y"] = {"family": self.kernel_y.family, "bandwidth": self.kernel_y.bandwidth}
        for key in ("propensity_covariates", "outcome_covariates"):
            if d[key] is not None:
                d[key] = list(d[key])
        return d


@dataclass(frozen=True)
class TestResult:
    __test__ = False

    statistic: Statistic
    bootstrap_values: NDArray[np.float64]
    quantile: float
    reject: bool
    exceedance: float
    alpha: float
    B: int
    seed: int
    config: dict

    @property
    def n(self) -> int:
        return self.statistic.n

    def to_dict(self) -> dict:
        return {
            "statistic": self.statistic.to_dict(),
            "quantile": self.quantile,
            "alpha": self.alpha,
            "B": self.B,
            "reject": self.reject,
            "exceedance": self.exceedance,
            "seed": self.seed,
            "n": self.n,
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


@dataclass(frozen=True)
class BandResult:
    kind: Literal["mmd_slice", "mmd_global", "wald_global"]
    profile: NDArray[np.float64]
    y_grid: NDArray[np.float64]
    witness: NDArray[np.float64]
    half_width: NDArray[np.float64]
    alpha: float
    quantile: float

    @property
    def lower(self) -> NDArray[np.float64]:
        return self.witness - self.half_width

    @property
    def upper(self) -> NDArray[np.float64]:
        return self.witness + self.half_width

    def contains(self, values: NDArray | float = 0.0) -> bool:
        v = np.broadcast_to(np.asarray(values, dtype=np.float64), self.witness.shape)
        return bool(np.all((self.lower <= v) & (v <= self.upper)))

    def write(self, fh: TextIO) -> None:
        """CSV with columns ``y_1 .. y_d, witness, lower, upper``."""
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"y_{j + 1}" for j in range(self.y_grid.shape[1])] + ["witness", "lower", "upper"])
        for g in range(self.y_grid.shape[0]):
            row = list(self.y_grid[g]) + [self.witness[g], self.lower[g], self.upper[g]]
            w.writerow([repr(float(v)) for v in row])

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            self.write(fh)


# ---------------------------------------------------------------- multipliers


def replicate_rng(seed: int, b: int, tag: int = _BOOT_TAG) -> np.random.Generator:
    """Generator for replicate ``b``: Philox keyed by ``(seed, tag)``, counter block ``b``.

    Streams for different ``b`` never overlap and do not depend on the order
    in which replicates are evaluated.
    """
    return np.random.Generator(np.random.Philox(key=_philox_key(int(seed), int(tag)), counter=int(b) << 192))


@functools.lru_cache(maxsize=64)
def _philox_key(seed: int, tag: int) -> int:
    state = np.random.SeedSequence([seed, tag]).generate_state(2, np.uint64)
    return int(state[0]) | (int(state[1]) << 64)


def draw_multipliers(folds: FoldAssignment, rng: np.random.Generator) -> NDArray[np.float64]:
    """Per fold, multinomial counts of ``n_r`` trials over ``n_r`` equal cells, minus one.

    The counts are tallied from ``n_r`` uniform cell indices, which has the
    same law as a single multinomial draw and is several times faster.
    """
    xi = np.empty(folds.n)
    for r in (1, 2):
        idx = folds.indices(r)
        m = idx.shape[0]
        xi[idx] = np.bincount(rng.integers(0, m, size=m), minlength=m) - 1.0
    return xi


def multiplier_matrix(folds: FoldAssignment, seed: int, start: int, stop: int, tag: int = _BOOT_TAG) -> NDArray[np.float64]:
    """Columns are the multipliers of replicates ``start .. stop-1``."""
    out = np.empty((folds.n, stop - start))
    for j, b in enumerate(range(start, stop)):
        out[:, j] = draw_multipliers(folds, replicate_rng(seed, b, tag))
    return out


def bootstrap_replicate_mmd(M: NDArray, xi: NDArray, n: int) -> float:
    """``n xi' M xi``."""
    return float(n * (xi @ (M @ xi)))


def bootstrap_replicate_wald(pre: WaldPrecompute, xi: NDArray, n: int) -> float:
    """One Wald replicate from the stored LU factors: two ``O(n^2)`` maps and a triangular solve."""
    eps = pre.epsilon
    quad = float(xi @ (pre.M @ xi))
    if eps == 1.0:
        return n * quad
    z = pre.solve(pre.R_times(xi))
    return float(n * (quad / eps - (1.0 - eps) / eps * (pre.P_times(xi) @ z)))


def _resolve_threads(threads: int) -> int:
    if threads == 0:
        import os

        return os.cpu_count() or 1
    return threads


def bootstrap_values(
    Q: NDArray,
    folds: FoldAssignment,
    B: int,
    seed: int,
    *,
    n: int | None = None,
    threads: int = 1,
    tag: int = _BOOT_TAG,
) -> NDArray[np.float64]:
    """``n xi_b' Q xi_b`` for ``b = 0 .. B-1``, in replicate order.

    Replicates are processed in fixed blocks of ``CHUNK`` so the output is
    bit-identical for every ``threads`` value.
    """
    n = Q.shape[0] if n is None else int(n)
    chunks = [(s, min(s + CHUNK, B)) for s in range(0, B, CHUNK)]

    def work(bounds: tuple[int, int]) -> NDArray[np.float64]:
        Xi = multiplier_matrix(folds, seed, bounds[0], bounds[1], tag)
        return n * np.einsum("ib,ib->b", Xi, Q @ Xi)

    threads = _resolve_threads(threads)
    if threads <= 1 or len(chunks) == 1:
        parts = [work(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, chunks))
    return np.concatenate(parts) if parts else np.empty(0)


def quantile(values: NDArray | Sequence[float], alpha: float) -> float:
    """The ``ceil((1 - alpha) B)``-th smallest value (1-indexed).

    >>> quantile([4.0, 1.0, 3.0, 2.0], 0.25)
    3.0
    """
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    B = v.shape[0]
    if B < 1:
        raise DomainError("quantile of an empty sample")
    if not 0.0 < alpha < 1.0:
        raise DomainError(f"alpha must lie in (0, 1), got {alpha}")
    # The small slack keeps e.g. (1 - 0.05) * 1000 from rounding up to 951.
    k = min(max(math.ceil((1.0 - alpha) * B - 1e-9), 1), B)
    return float(np.partition(v, k - 1)[k - 1])


def exceedance(values: NDArray, observed: float) -> float:
    """``(#{values >= observed} + 1) / (B + 1)``."""
    v = np.asarray(values)
    return float((np.count_nonzero(v >= observed) + 1) / (v.shape[0] + 1))


# ---------------------------------------------------------------- pipeline


@dataclass(frozen=True)
class SKCDFit:
    """Everything fitted once per dataset; shared by the statistics, bootstrap and bands."""

    dataset: Dataset
    folds: FoldAssignment
    kernel_x: KernelSpec
    kernel_y: KernelSpec
    K: NDArray[np.float64]
    L: NDArray[np.float64]
    propensity: PropensityFit
    coefs: CoefficientMatrices
    wald: WaldPrecompute | None
    M: NDArray[np.float64]

    @property
    def n(self) -> int:
        return self.dataset.n

    @property
    def C(self) -> NDArray[np.float64]:
        return self.coefs.C

    def statistic(self, kind: Literal["mmd", "wald"]) -> Statistic:
        if kind == "mmd":
            return mmd_statistic(self.C, self.K, self.L, self.n)
        return wald_statistic(self._wald(), self.C, self.K, self.L, self.n)

    def bootstrap_matrix(self, kind: Literal["mmd", "wald"]) -> NDArray[np.float64]:
        return self.M if kind == "mmd" else self._wald().Q

    def _wald(self) -> WaldPrecompute:
        if self.wald is None:
            raise DomainError("fit was built without the Wald precompute")
        return self.wald


def fit_skcd(
    dataset: Dataset,
    config: TestConfig,
    *,
    known_propensity: NDArray | None = None,
    with_wald: bool | None = None,
) -> SKCDFit:
    """Folds, bandwidths, Gram matrices, nuisances, coefficients and (optionally) the Wald precompute."""
    n = dataset.n
    folds = make_folds(n, dataset.treatment, config.seed)
    kx = config.kernel_x.resolve(dataset.covariates)
    ky = config.kernel_y.resolve(dataset.outcomes)
    K = gram(dataset.covariates, kx)
    L = gram(dataset.outcomes, ky)

    pcols = config.propensity_covariates
    prop = fit_propensity(
        dataset, folds, config.propensity, known=known_propensity, covariates=None if pcols is None else list(pcols)
    )
    if config.outcome_covariates is None:
        K_nuis = K
    else:
        x_nuis = dataset.subset_covariates(list(config.outcome_covariates))
        K_nuis = gram(x_nuis, config.kernel_x.resolve(x_nuis))
    weights = fit_outcome_weights(dataset, folds, K_nuis, config.lam)
    coefs = build_coefficients(dataset, folds, prop, weights)

    if with_wald is None:
        with_wald = config.stat == "wald"
    if with_wald:
        pre = build_wald_precompute(coefs.C, coefs.E, K, L, folds, config.epsilon, config.gamma)
        M = pre.M
    else:
        pre = None
        P = coefs.C @ L @ coefs.C.T
        M = K * (0.5 * (P + P.T))
    return SKCDFit(dataset, folds, kx, ky, K, L, prop, coefs, pre, M)


def _result(fit: SKCDFit, kind: str, config: TestConfig) -> TestResult:
    stat = fit.statistic(kind)
    vals = bootstrap_values(fit.bootstrap_matrix(kind), fit.folds, config.B, config.seed, n=fit.n, threads=config.threads)
    q = quantile(vals, config.alpha)
    cfg = replace(config, stat=kind).to_dict()
    cfg["kernel_x"]["bandwidth"] = fit.kernel_x.sigma
    cfg["kernel_y"]["bandwidth"] = fit.kernel_y.sigma
    if stat.epsilon is not None:
        cfg["epsilon_resolved"] = stat.epsilon
    return TestResult(
        statistic=stat,
        bootstrap_values=vals,
        quantile=q,
        reject=bool(stat.value > q),
        exceedance=exceedance(vals, stat.value),
        alpha=config.alpha,
        B=int(config.B),
        seed=int(config.seed),
        config=cfg,
    )


def skcd_test(
    dataset: Dataset,
    config: TestConfig,
    *,
    known_propensity: NDArray | None = None,
    fit: SKCDFit | None = None,
) -> TestResult:
    """Run the full test. Pass ``fit`` to reuse nuisances across statistics."""
    if config.B < 50:
        warnings.warn(f"B={config.B} bootstrap replicates is small; quantiles will be coarse", stacklevel=2)
    if fit is None:
        fit = fit_skcd(dataset, config, known_propensity=known_propensity)
    return _result(fit, config.stat, config)


# ---------------------------------------------------------------- bands


def mmd_slice_gram(C: NDArray, L: NDArray, k_x: NDArray) -> NDArray[np.float64]:
    """``(k_x k_x') o (C L C')``."""
    P = C @ L @ C.T
    P = 0.5 * (P + P.T)
    return np.outer(k_x, k_x) * P


def _as_grid(y_grid: NDArray, d_y: int) -> NDArray[np.float64]:
    g = np.asarray(y_grid, dtype=np.float64)
    if g.ndim == 1:
        g = g[:, None]
    if g.shape[1] != d_y:
        raise DomainError(f"grid points have dimension {g.shape[1]}, outcomes have {d_y}")
    return g


def mmd_slice_band(
    fit: SKCDFit,
    profile: NDArray,
    y_grid: NDArray,
    B: int = 1000,
    alpha: float = 0.05,
    seed: int = 0,
    threads: int = 1,
) -> BandResult:
    """Band uniform in ``y`` at a fixed covariate profile; constant half-width ``sqrt(q/n)``."""
    x = np.asarray(profile, dtype=np.float64).reshape(-1)
    if x.shape[0] != fit.dataset.d_x:
        raise DomainError(f"profile has dimension {x.shape[0]}, covariates have {fit.dataset.d_x}")
    grid = _as_grid(y_grid, fit.dataset.d_y)
    k_x = kernel_vector(fit.dataset.covariates, x, fit.kernel_x)
    Mx = mmd_slice_gram(fit.C, fit.L, k_x)
    vals = bootstrap_values(Mx, fit.folds, B, seed, n=fit.n, threads=threads, tag=_SLICE_TAG)
    q = quantile(vals, alpha)
    witness = witness_grid(fit.C, k_x, cross_gram(fit.dataset.outcomes, grid, fit.kernel_y))
    half = np.full(grid.shape[0], math.sqrt(max(q, 0.0) / fit.n))
    return BandResult("mmd_slice", x, grid, witness, half, alpha, q)


def _sigma_term(fit: SKCDFit, k_x: NDArray, l_grid: NDArray) -> NDArray[np.float64]:
    """``<Lambda, Sigma_n Lambda>`` at one ``x`` and each grid ``y``."""
    C, E = fit.coefs.C, fit.coefs.E
    out = np.zeros(l_grid.shape[1])
    for s in (1, 2):
        idx = fit.folds.indices(s)
        ns = idx.shape[0]
        D_l = math.sqrt(2.0 * ns) * (C[idx] @ l_grid)  # (D^s l_y)_i for i in fold s
        V_l = math.sqrt(2.0 / ns) * (k_x[idx] @ (E[idx] @ l_grid))  # k_x' V^s l_y
        out += np.sum((k_x[idx, None] * D_l - V_l[None, :]) ** 2, axis=0)
    return out


def global_band_width(
    kind: Literal["mmd", "wald"],
    fit: SKCDFit,
    profile: NDArray,
    y_grid: NDArray,
    q_hat: float,
) -> NDArray[np.float64]:
    """Half-width ``w(x, y)`` of the simultaneous band at each grid point.

    ``q_hat`` is the bootstrap quantile of the matching test statistic.
    """
    x = np.asarray(profile, dtype=np.float64).reshape(-1)
    grid = _as_grid(y_grid, fit.dataset.d_y)
    base = max(q_hat, 0.0) / fit.n
    if kind == "mmd":
        return np.full(grid.shape[0], math.sqrt(base))
    eps = fit._wald().epsilon
    if eps == 1.0:
        return np.full(grid.shape[0], math.sqrt(base))
    k_x = kernel_vector(fit.dataset.covariates, x, fit.kernel_x)
    l_grid = cross_gram(fit.dataset.outcomes, grid, fit.kernel_y)
    return np.sqrt(((1.0 - eps) * _sigma_term(fit, k_x, l_grid) + eps) * base)


def global_band(
    kind: Literal["mmd", "wald"],
    fit: SKCDFit,
    profile: NDArray,
    y_grid: NDArray,
    B: int = 1000,
    alpha: float = 0.05,
    seed: int = 0,
    threads: int = 1,
) -> BandResult:
    """Simultaneous band over all ``(x, y)``, evaluated on one profile slice."""
    x = np.asarray(profile, dtype=np.float64).reshape(-1)
    grid = _as_grid(y_grid, fit.dataset.d_y)
    vals = bootstrap_values(fit.bootstrap_matrix(kind), fit.folds, B, seed, n=fit.n, threads=threads)
    q = quantile(vals, alpha)
    k_x = kernel_vector(fit.dataset.covariates, x, fit.kernel_x)
    witness = witness_grid(fit.C, k_x, cross_gram(fit.dataset.outcomes, grid, fit.kernel_y))
    half = global_band_width(kind, fit, x, grid, q)
    return BandResult(f"{kind}_global", x, grid, witness, half, alpha, q)


# ---------------------------------------------------------------- Monte Carlo


def wilson_interval(successes: int, trials: int, z: float = WILSON_Z) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion."""
    if trials <= 0:
        raise DomainError("need at least one trial")
    p = successes / trials
    denom = 1.0 + z * z / trials
    centre = (p + z * z / (2 * trials)) / denom
    half = z * math.sqrt(p * (1 - p) / trials + z * z / (4 * trials * trials)) / denom
    return max(0.0, centre - half), min(1.0, centre + half)


@dataclass(frozen=True)
class MonteCarloResult:
    method: str
    n: int
    regime: str
    rejections: int
    R: int
    rate: float
    ci: tuple[float, float]


def replicate_seeds(master_seed: int, R: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence([int(master_seed), 0x3C]).generate_state(R, np.uint32)]


def monte_carlo_rejection_rate(
    n: int,
    hypothesis: Literal["null", "alternative"],
    config: TestConfig,
    R: int,
    master_seed: int = 0,
    *,
    methods: Iterable[str] = ("mmd",),
    dgp_propensity: Literal["constant", "logistic"] = "logistic",
    noise_covariates: int = 0,
    kcd_permutations: int = 150,
    progress: bool = False,
) -> dict[str, MonteCarloResult]:
    """Rejection rates on ``R`` fresh draws of the uniform benchmark.

    ``methods`` picks from ``"mmd"``, ``"wald"`` and ``"kcd"``. SKCD methods
    share one nuisance fit per draw. With ``config.propensity == "known"``
    the true propensities of the simulation are passed through, to SKCD and
    to the KCD label resampler alike.
    """
    from .baseline_kcd import KcdConfig, kcd_permutation_test

    methods = tuple(methods)
    if R < 10:
        raise DomainError(f"need R >= 10 replicates, got {R}")
    unknown = set(methods) - {"mmd", "wald", "kcd"}
    if unknown:
        raise DomainError(f"unknown methods {sorted(unknown)}")
    counts = dict.fromkeys(methods, 0)
    skcd = [m for m in methods if m != "kcd"]
    for r, seed in enumerate(replicate_seeds(master_seed, R)):
        ds, pi = simulate_fig1(n, hypothesis, dgp_propensity, seed, noise_covariates)
        cfg = replace(config, seed=seed)
        if skcd:
            known = pi if cfg.propensity == "known" else None
            fit = fit_skcd(ds, cfg, known_propensity=known, with_wald="wald" in skcd)
            for m in skcd:
                counts[m] += _result(fit, m, replace(cfg, stat=m)).reject
        if "kcd" in methods:
            kcfg = KcdConfig(
                M=kcd_permutations,
                alpha=cfg.alpha,
                lam=cfg.lam,
                seed=seed,
                threads=cfg.threads,
                propensity_covariates=cfg.propensity_covariates,
            )
            kres = kcd_permutation_test(ds, kcfg, propensity=pi if cfg.propensity == "known" else None)
            counts["kcd"] += kres.reject
        if progress:
            log.info("replicate %d/%d: %s", r + 1, R, counts)
    out = {}
    for m, k in counts.items():
        out[m] = MonteCarloResult(m, n, hypothesis, int(k), R, k / R, wilson_interval(int(k), R))
    return out
