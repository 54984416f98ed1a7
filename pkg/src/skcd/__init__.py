"""Doubly robust kernel tests for conditional distributional treatment effects."""

from .baseline_kcd import KcdConfig, KcdResult, kcd_permutation_test, kcd_propensity, kcd_statistic
from .data import Dataset, FoldAssignment, SchemaConfig, load_csv, make_folds, simulate_fig1, write_csv
from .estimator import CoefficientMatrices, build_coefficients
from .exceptions import DomainError, NumericalError, ParseError, SchemaError, SKCDError
from .inference import (
    BandResult,
    TestConfig,
    TestResult,
    fit_skcd,
    global_band,
    mmd_slice_band,
    monte_carlo_rejection_rate,
    quantile,
    skcd_test,
)
from .kernels import KernelSpec, gram, median_heuristic
from .statistics import Statistic, brute_force_statistic, build_wald_precompute, mmd_statistic, wald_statistic

__all__ = [
    "BandResult",
    "CoefficientMatrices",
    "Dataset",
    "DomainError",
    "FoldAssignment",
    "KcdConfig",
    "KcdResult",
    "KernelSpec",
    "NumericalError",
    "ParseError",
    "SKCDError",
    "SchemaConfig",
    "SchemaError",
    "Statistic",
    "TestConfig",
    "TestResult",
    "brute_force_statistic",
    "build_coefficients",
    "build_wald_precompute",
    "fit_skcd",
    "global_band",
    "gram",
    "kcd_permutation_test",
    "kcd_propensity",
    "kcd_statistic",
    "load_csv",
    "make_folds",
    "median_heuristic",
    "mmd_slice_band",
    "mmd_statistic",
    "monte_carlo_rejection_rate",
    "quantile",
    "simulate_fig1",
    "skcd_test",
    "wald_statistic",
    "write_csv",
]
