"""Datasets, CSV ingestion, cross-fitting folds and the synthetic benchmark DGP."""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
from numpy.typing import NDArray

from .exceptions import DomainError, ParseError, SchemaError

__all__ = [
    "Dataset",
    "FoldAssignment",
    "SchemaConfig",
    "load_csv",
    "write_csv",
    "make_folds",
    "simulate_fig1",
    "fig1_propensity",
]


def _frozen(a: NDArray) -> NDArray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


def _default_names(prefix: str, d: int) -> tuple[str, ...]:
    if d == 1:
        return (prefix,)
    return tuple(f"{prefix}{j + 1}" for j in range(d))


@dataclass(frozen=True)
class Dataset:
    """Observed sample ``(X, A, Y)``.

    ``covariates`` is ``(n, d_x)``, ``treatment`` a 0/1 vector of length
    ``n`` and ``outcomes`` is ``(n, d_y)``. Arrays are copied and made
    read-only on construction. ``scaling`` maps each standardized column
    name to its ``(mean, sd)``.
    """

    covariates: NDArray[np.float64]
    treatment: NDArray[np.int64]
    outcomes: NDArray[np.float64]
    covariate_names: tuple[str, ...] = ()
    treatment_name: str = "a"
    outcome_names: tuple[str, ...] = ()
    scaling: dict[str, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        x = np.asarray(self.covariates, dtype=np.float64)
        y = np.asarray(self.outcomes, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        if y.ndim == 1:
            y = y[:, None]
        a_raw = np.asarray(self.treatment)
        if a_raw.ndim != 1:
            raise DomainError("treatment must be a vector")
        if not np.all(np.isin(a_raw, (0, 1))):
            raise DomainError("treatment values must lie in {0, 1}")
        a = a_raw.astype(np.int64)
        n = a.shape[0]
        if x.shape[0] != n or y.shape[0] != n:
            raise DomainError(
                f"row counts disagree: covariates {x.shape[0]}, treatment {n}, outcomes {y.shape[0]}"
            )
        if n < 4:
            raise DomainError(f"need at least 4 observations, got {n}")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise DomainError("covariates and outcomes must be finite")
        if a.min() == a.max():
            raise DomainError("treatment must contain both arms")
        object.__setattr__(self, "covariates", _frozen(x))
        object.__setattr__(self, "outcomes", _frozen(y))
        object.__setattr__(self, "treatment", _frozen(a))
        xn = tuple(self.covariate_names) or _default_names("x", x.shape[1])
        yn = tuple(self.outcome_names) or _default_names("y", y.shape[1])
        if len(xn) != x.shape[1] or len(yn) != y.shape[1]:
            raise SchemaError("column name counts do not match array widths")
        object.__setattr__(self, "covariate_names", xn)
        object.__setattr__(self, "outcome_names", yn)
        object.__setattr__(self, "scaling", dict(self.scaling))

    @property
    def n(self) -> int:
        return int(self.treatment.shape[0])

    @property
    def d_x(self) -> int:
        return int(self.covariates.shape[1])

    @property
    def d_y(self) -> int:
        return int(self.outcomes.shape[1])

    def subset_covariates(self, columns: Sequence[int]) -> NDArray[np.float64]:
        """Covariate matrix restricted to the given column indices."""
        return self.covariates[:, list(columns)]


@dataclass(frozen=True)
class FoldAssignment:
    """Two-way partition used for cross-fitting.

    ``fold_of[i]`` is 1 or 2; nuisances used at observation ``i`` are fitted
    on the other fold ``3 - fold_of[i]``.
    """

    fold_of: NDArray[np.int64]

    def __post_init__(self) -> None:
        f = np.asarray(self.fold_of).astype(np.int64)
        if f.ndim != 1 or not np.all(np.isin(f, (1, 2))):
            raise DomainError("fold_of must be a vector with values in {1, 2}")
        object.__setattr__(self, "fold_of", _frozen(f))

    @property
    def n(self) -> int:
        return int(self.fold_of.shape[0])

    @property
    def sizes(self) -> tuple[int, int]:
        n1 = int(np.count_nonzero(self.fold_of == 1))
        return n1, self.n - n1

    def size(self, s: int) -> int:
        return self.sizes[s - 1]

    def indices(self, s: int) -> NDArray[np.int64]:
        """Global indices of fold ``s`` in increasing order."""
        return np.flatnonzero(self.fold_of == s)

    def mask(self, s: int) -> NDArray[np.bool_]:
        return self.fold_of == s

    def validate(self, treatment: NDArray) -> None:
        """Check that every fold holds both arms."""
        a = np.asarray(treatment)
        if a.shape[0] != self.n:
            raise DomainError("fold assignment and treatment lengths differ")
        for s in (1, 2):
            arms = set(np.unique(a[self.fold_of == s]).tolist())
            if arms != {0, 1}:
                raise DomainError(f"fold {s} must contain treated and control observations")


@dataclass(frozen=True)
class SchemaConfig:
    """Column layout for CSV ingestion."""

    covariate_columns: tuple[str, ...]
    treatment_column: str
    outcome_columns: tuple[str, ...]
    standardize: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        cov = tuple(self.covariate_columns)
        out = tuple(self.outcome_columns)
        std = tuple(self.standardize)
        object.__setattr__(self, "covariate_columns", cov)
        object.__setattr__(self, "outcome_columns", out)
        object.__setattr__(self, "standardize", std)
        if not cov or not out:
            raise SchemaError("need at least one covariate and one outcome column")
        groups = [set(cov), {self.treatment_column}, set(out)]
        if len(set(cov)) != len(cov) or len(set(out)) != len(out):
            raise SchemaError("duplicate column names in schema")
        if sum(len(g) for g in groups) != len(set().union(*groups)):
            raise SchemaError("covariate, treatment and outcome columns must be disjoint")
        unknown = set(std) - set(cov) - set(out)
        if unknown:
            raise SchemaError(f"standardize lists columns not in the schema: {sorted(unknown)}")

    @classmethod
    def from_json(cls, path: str | Path) -> SchemaConfig:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        try:
            return cls(
                covariate_columns=tuple(raw["covariate_columns"]),
                treatment_column=raw["treatment_column"],
                outcome_columns=tuple(raw["outcome_columns"]),
                standardize=tuple(raw.get("standardize", ())),
            )
        except KeyError as exc:
            raise SchemaError(f"schema file is missing key {exc.args[0]!r}") from None

    def to_dict(self) -> dict:
        return {
            "covariate_columns": list(self.covariate_columns),
            "treatment_column": self.treatment_column,
            "outcome_columns": list(self.outcome_columns),
            "standardize": list(self.standardize),
        }


def load_csv(path: str | Path, schema: SchemaConfig) -> Dataset:
    """Read a headered CSV into a :class:`Dataset`.

    Columns named in ``schema.standardize`` are centred and scaled to unit
    sample standard deviation (divisor ``n - 1``); the ``(mean, sd)`` pairs
    are kept in ``Dataset.scaling``.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path} is empty; a header row is required") from None
        rows = [r for r in reader if r]

    wanted = list(schema.covariate_columns) + [schema.treatment_column] + list(schema.outcome_columns)
    missing = [c for c in wanted if c not in header]
    if missing:
        raise SchemaError(f"missing column(s) {missing} in {path}")
    pos = {c: header.index(c) for c in wanted}

    values: dict[str, list[float]] = {c: [] for c in wanted}
    for line_no, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise ParseError(f"row {line_no}: expected {len(header)} fields, got {len(row)}", row=line_no)
        for c in wanted:
            cell = row[pos[c]].strip()
            try:
                v = float(cell)
            except ValueError:
                raise ParseError(
                    f"row {line_no}, column {c!r}: cannot parse {cell!r} as a number",
                    row=line_no,
                    column=c,
                ) from None
            if not math.isfinite(v):
                raise ParseError(f"row {line_no}, column {c!r}: non-finite value", row=line_no, column=c)
            values[c].append(v)

    a_vals = np.asarray(values[schema.treatment_column])
    bad = ~np.isin(a_vals, (0.0, 1.0))
    if np.any(bad):
        first = int(np.flatnonzero(bad)[0])
        raise DomainError(
            f"row {first + 2}: treatment value {a_vals[first]!r} is not in {{0, 1}}"
        )

    scaling: dict[str, tuple[float, float]] = {}
    for c in schema.standardize:
        col = np.asarray(values[c])
        if col.shape[0] < 2:
            raise DomainError(f"cannot standardize column {c!r} with fewer than 2 rows")
        mu = float(col.mean())
        sd = float(col.std(ddof=1))
        if not sd > 0.0:
            raise DomainError(f"zero variance column {c!r}")
        values[c] = list((col - mu) / sd)
        scaling[c] = (mu, sd)

    x = np.column_stack([values[c] for c in schema.covariate_columns])
    y = np.column_stack([values[c] for c in schema.outcome_columns])
    ds = Dataset(
        covariates=x,
        treatment=a_vals.astype(np.int64),
        outcomes=y,
        covariate_names=schema.covariate_columns,
        treatment_name=schema.treatment_column,
        outcome_names=schema.outcome_columns,
        scaling=scaling,
    )
    _warn_duplicates(ds)
    return ds


def _warn_duplicates(ds: Dataset) -> None:
    for name, arr in (("covariate", ds.covariates), ("outcome", ds.outcomes)):
        if np.unique(arr, axis=0).shape[0] < arr.shape[0]:
            warnings.warn(
                f"dataset contains duplicated {name} rows; closed-form Wald identities assume distinct points",
                stacklevel=3,
            )


def write_csv(dataset: Dataset, path: str | Path) -> None:
    """Write ``dataset`` with a header row; floats use shortest round-trip repr."""
    header = list(dataset.covariate_names) + [dataset.treatment_name] + list(dataset.outcome_names)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(dataset.n):
            w.writerow(
                [repr(float(v)) for v in dataset.covariates[i]]
                + [str(int(dataset.treatment[i]))]
                + [repr(float(v)) for v in dataset.outcomes[i]]
            )


def make_folds(n: int, treatment: NDArray, seed: int) -> FoldAssignment:
    """Random two-fold split stratified by treatment arm.

    Each arm is shuffled and halved. When an arm has odd size the spare unit
    goes to whichever fold is currently smaller, so fold sizes differ by at
    most one overall as well as within each arm.
    """
    a = np.asarray(treatment)
    if a.shape != (n,):
        raise DomainError(f"treatment must have length n={n}")
    if n < 4:
        raise DomainError(f"need n >= 4 for two folds, got {n}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xF01D]))
    fold_of = np.empty(n, dtype=np.int64)
    counts = [0, 0]
    for arm in (1, 0):
        idx = np.flatnonzero(a == arm)
        if idx.shape[0] < 2:
            raise DomainError(f"arm a={arm} has {idx.shape[0]} member(s); need at least 2 to place one per fold")
        idx = rng.permutation(idx)
        half = idx.shape[0] // 2
        if idx.shape[0] % 2 == 0:
            first_gets = half
        elif counts[0] != counts[1]:
            first_gets = half + (1 if counts[0] < counts[1] else 0)
        else:
            first_gets = half + int(rng.integers(0, 2))
        fold_of[idx[:first_gets]] = 1
        fold_of[idx[first_gets:]] = 2
        counts[0] += first_gets
        counts[1] += idx.shape[0] - first_gets
    return FoldAssignment(fold_of)


def fig1_propensity(x: NDArray) -> NDArray[np.float64]:
    """Nonlinear logistic propensity min-max rescaled to ``[0.2, 0.8]`` over the sample."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    p = 1.0 / (1.0 + np.exp(-(2.0 - 1.5 * x * np.tanh(2.0 * x))))
    span = p.max() - p.min()
    if span <= 0.0:
        return np.full_like(p, 0.5)
    return 0.2 + 0.6 * (p - p.min()) / span


def simulate_fig1(
    n: int,
    hypothesis: Literal["null", "alternative"] = "alternative",
    propensity: Literal["constant", "logistic"] = "constant",
    seed: int = 0,
    noise_covariates: int = 0,
) -> tuple[Dataset, NDArray[np.float64]]:
    """Draw from the uniform benchmark with a null conditional mean effect.

    ``X, Y(0) ~ Unif[-1, 1]``. Under the alternative ``Y(1) | X`` is
    ``Unif[-.5, .5]`` for ``X > 0`` and ``Unif([-1, -.5] u [.5, 1])``
    otherwise; under the null ``Y(1)`` has the law of ``Y(0)``.

    ``noise_covariates`` appends that many independent ``Unif[-1, 1]``
    columns after ``x``; they carry no signal and exist so that nuisance
    models can be deliberately misspecified by withholding ``x``.

    Returns the dataset and the true propensity of every unit.
    """
    if n < 4:
        raise DomainError(f"need n >= 4, got {n}")
    if hypothesis not in ("null", "alternative"):
        raise DomainError(f"unknown hypothesis {hypothesis!r}")
    if propensity not in ("constant", "logistic"):
        raise DomainError(f"unknown propensity {propensity!r}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x516]))

    # Resample the (rare) draw in which one arm is empty.
    while True:
        x = rng.uniform(-1.0, 1.0, size=n)
        y0 = rng.uniform(-1.0, 1.0, size=n)
        if hypothesis == "null":
            y1 = rng.uniform(-1.0, 1.0, size=n)
        else:
            inner = rng.uniform(-0.5, 0.5, size=n)
            outer = rng.uniform(0.5, 1.0, size=n) * rng.choice((-1.0, 1.0), size=n)
            y1 = np.where(x > 0, inner, outer)
        pi = np.full(n, 0.5) if propensity == "constant" else fig1_propensity(x)
        a = (rng.uniform(size=n) < pi).astype(np.int64)
        if 0 < a.sum() < n:
            break

    y = np.where(a == 1, y1, y0)
    cov = x[:, None]
    names: tuple[str, ...] = ("x",)
    if noise_covariates > 0:
        cov = np.column_stack([x, rng.uniform(-1.0, 1.0, size=(n, noise_covariates))])
        names = ("x",) + tuple(f"noise{j + 1}" for j in range(noise_covariates))
    ds = Dataset(covariates=cov, treatment=a, outcomes=y[:, None], covariate_names=names, outcome_names=("y",))
    return ds, pi
