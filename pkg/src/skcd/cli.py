"""``skcd`` command line: test, band, simulate, kcd, oracle-check.

Exit status is 0 on success, 1 when the package rejects the input or the
numerics fail, and 2 on usage errors or missing files.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .baseline_kcd import KcdConfig, kcd_permutation_test
from .data import Dataset, SchemaConfig, load_csv
from .estimator import dump_coefficients
from .exceptions import DomainError, SKCDError
from .inference import TestConfig, fit_skcd, global_band, mmd_slice_band, monte_carlo_rejection_rate, skcd_test
from .oracle import oracle_check

log = logging.getLogger("skcd")

EXIT_DOMAIN = 1
EXIT_USAGE = 2
ORACLE_TOL = 1e-8


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit(2) after printing usage
        raise UsageError(message)


def _add_data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="input CSV with a header row")
    p.add_argument("--schema", required=True, help="JSON column layout")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lambda", dest="lam", type=float, default=1e-3, help="ridge parameter of the outcome models")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1, help="worker threads for resampling (0 = all cores)")
    p.add_argument("--out", help="output path (default: stdout)")


def _add_skcd(p: argparse.ArgumentParser) -> None:
    p.add_argument("--stat", choices=("mmd", "wald"), default="mmd")
    p.add_argument(
        "--propensity",
        default="logistic",
        help="logistic | constant | known:<path> (one value per row, optional header)",
    )
    p.add_argument("--gamma", type=float, default=1.0 / 3.0, help="trace heuristic weight for the Wald regulariser")
    p.add_argument("--epsilon", type=float, default=None, help="fixed Wald regulariser in (0, 1]; overrides --gamma")
    p.add_argument("--B", type=int, default=1000, help="bootstrap replicates")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="skcd", description="Conditional distributional treatment effect tests.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("test", help="run the SKCD test and write the result as JSON")
    _add_data_args(p)
    _add_skcd(p)
    _add_common(p)
    p.add_argument("--dump-coefs", metavar="DIR", help="also write C.csv and E.csv to DIR")

    p = sub.add_parser("band", help="confidence band along outcome cross-sections at one covariate profile")
    _add_data_args(p)
    _add_skcd(p)
    _add_common(p)
    p.add_argument("--profile-row", type=int, default=0, help="0-based data row whose covariates define the profile")
    p.add_argument(
        "--grid",
        action="append",
        default=None,
        help="j:lo:hi:steps; vary outcome coordinate j (1-based) with the others at 0; repeatable",
    )
    p.add_argument("--band", choices=("slice", "global"), default="slice")

    p = sub.add_parser("simulate", help="Monte Carlo rejection rates on the uniform benchmark")
    p.add_argument("--n", type=int, nargs="+", default=[250, 500, 1000])
    p.add_argument("--regime", choices=("null", "alternative"), nargs="+", default=["null", "alternative"])
    p.add_argument("--methods", choices=("mmd", "wald", "kcd"), nargs="+", default=["mmd", "wald"])
    p.add_argument("--R", type=int, default=200, help="Monte Carlo replicates per cell")
    p.add_argument("--propensity", choices=("known", "logistic", "constant"), default="known")
    p.add_argument("--dgp-propensity", choices=("logistic", "constant"), default="logistic")
    p.add_argument(
        "--misspecify",
        choices=("none", "propensity", "outcome", "both"),
        default="none",
        help="fit the named nuisance models on a pure-noise covariate only",
    )
    p.add_argument("--gamma", type=float, default=1.0 / 3.0)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--B", type=int, default=500)
    p.add_argument("--M", type=int, default=150, help="permutations for the kcd method")
    _add_common(p)

    p = sub.add_parser("kcd", help="KCD resampling test baseline")
    _add_data_args(p)
    p.add_argument("--M", type=int, default=150, help="resampled label vectors")
    p.add_argument(
        "--propensity",
        default="logistic",
        help="labels are redrawn from this propensity: logistic | known:<path>",
    )
    p.add_argument("--resample", choices=("propensity", "permute"), default="propensity")
    _add_common(p)

    p = sub.add_parser("oracle-check", help="closed forms against dense oracles on small random instances")
    p.add_argument("--instances", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    return parser


def _load(args) -> tuple[Dataset, SchemaConfig]:
    for path in (args.data, args.schema):
        if not Path(path).is_file():
            raise FileNotFoundError(f"file not found: {path}")
    schema = SchemaConfig.from_json(args.schema)
    return load_csv(args.data, schema), schema


def _read_propensities(path: str, n: int) -> np.ndarray:
    if not Path(path).is_file():
        raise FileNotFoundError(f"file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if rows:
        try:
            float(rows[0][0])
        except ValueError:
            rows = rows[1:]
    try:
        w = np.array([float(r[0]) for r in rows])
    except ValueError as exc:
        raise DomainError(f"{path}: {exc}") from None
    if w.shape[0] != n:
        raise DomainError(f"{path}: expected {n} propensities, got {w.shape[0]}")
    return w


def _test_config(args, n: int) -> tuple[TestConfig, np.ndarray | None]:
    known = None
    method = args.propensity
    if method.startswith("known:"):
        known = _read_propensities(method.split(":", 1)[1], n)
        method = "known"
    elif method not in ("logistic", "constant"):
        raise UsageError(f"--propensity must be logistic, constant or known:<path>, got {method!r}")
    cfg = TestConfig(
        stat=args.stat,
        propensity=method,
        lam=args.lam,
        gamma=args.gamma,
        epsilon=args.epsilon,
        B=args.B,
        alpha=args.alpha,
        seed=args.seed,
        threads=args.threads,
    )
    return cfg, known


def _emit(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
    else:
        Path(out).write_text(text if text.endswith("\n") else text + "\n", encoding="utf-8")


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2)


def parse_grid(spec: str, d_y: int) -> np.ndarray:
    """``"j:lo:hi:steps"`` to a ``(steps, d_y)`` grid varying coordinate ``j`` (1-based)."""
    parts = spec.split(":")
    if len(parts) != 4:
        raise UsageError(f"--grid expects j:lo:hi:steps, got {spec!r}")
    try:
        j, lo, hi, steps = int(parts[0]), float(parts[1]), float(parts[2]), int(parts[3])
    except ValueError:
        raise UsageError(f"--grid expects j:lo:hi:steps, got {spec!r}") from None
    if not 1 <= j <= d_y:
        raise UsageError(f"--grid coordinate {j} outside 1..{d_y}")
    if steps < 1 or not hi >= lo:
        raise UsageError(f"--grid needs steps >= 1 and lo <= hi, got {spec!r}")
    g = np.zeros((steps, d_y))
    g[:, j - 1] = np.linspace(lo, hi, steps)
    return g


def cmd_test(args) -> int:
    ds, schema = _load(args)
    cfg, known = _test_config(args, ds.n)
    fit = fit_skcd(ds, cfg, known_propensity=known)
    res = skcd_test(ds, cfg, fit=fit)
    payload = res.to_dict()
    payload["config"]["schema"] = schema.to_dict()
    if args.dump_coefs:
        dump_coefficients(fit.coefs, args.dump_coefs)
    _emit(_dumps(payload), args.out)
    return 0


def cmd_band(args) -> int:
    ds, schema = _load(args)
    cfg, known = _test_config(args, ds.n)
    if not 0 <= args.profile_row < ds.n:
        raise UsageError(f"--profile-row must lie in 0..{ds.n - 1}")
    specs = args.grid or [f"{j}:-3:3:100" for j in range(1, ds.d_y + 1)]
    grid = np.vstack([parse_grid(s, ds.d_y) for s in specs])
    profile = ds.covariates[args.profile_row]
    fit = fit_skcd(ds, cfg, known_propensity=known, with_wald=args.band == "global" and cfg.stat == "wald")
    if args.band == "slice":
        if cfg.stat != "mmd":
            raise UsageError("slice bands are only available for --stat mmd")
        band = mmd_slice_band(fit, profile, grid, cfg.B, cfg.alpha, cfg.seed, cfg.threads)
    else:
        band = global_band(cfg.stat, fit, profile, grid, cfg.B, cfg.alpha, cfg.seed, cfg.threads)
    meta = {
        "kind": band.kind,
        "profile_row": args.profile_row,
        "profile": [float(v) for v in profile],
        "grid": specs,
        "quantile": band.quantile,
        "config": cfg.to_dict() | {"schema": schema.to_dict()},
    }
    if args.out is None:
        band.write(sys.stdout)
    else:
        band.to_csv(args.out)
        Path(args.out + ".json").write_text(_dumps(meta) + "\n", encoding="utf-8")
    return 0


_MISSPECIFY = {
    "none": (None, None),
    "propensity": ((1,), None),
    "outcome": (None, (1,)),
    "both": ((1,), (1,)),
}


def cmd_simulate(args) -> int:
    prop_cols, out_cols = _MISSPECIFY[args.misspecify]
    noise = 0 if args.misspecify == "none" else 1
    base = TestConfig(
        propensity=args.propensity,
        lam=args.lam,
        gamma=args.gamma,
        epsilon=args.epsilon,
        B=args.B,
        alpha=args.alpha,
        seed=args.seed,
        threads=args.threads,
        propensity_covariates=prop_cols,
        outcome_covariates=out_cols,
    )
    rows = []
    for n in args.n:
        for regime in args.regime:
            res = monte_carlo_rejection_rate(
                n,
                regime,
                base,
                args.R,
                args.seed,
                methods=args.methods,
                dgp_propensity=args.dgp_propensity,
                noise_covariates=noise,
                kcd_permutations=args.M,
            )
            for m in args.methods:
                r = res[m]
                rows.append([n, regime, m, repr(r.rate), repr(r.ci[0]), repr(r.ci[1])])
    lines = ["n,regime,method,rate,ci_lo,ci_hi"] + [",".join(str(v) for v in row) for row in rows]
    _emit("\n".join(lines), args.out)
    if args.out is not None:
        meta = {
            "R": args.R,
            "M": args.M,
            "misspecify": args.misspecify,
            "dgp_propensity": args.dgp_propensity,
            "methods": args.methods,
            "config": base.to_dict(),
        }
        Path(args.out + ".json").write_text(_dumps(meta) + "\n", encoding="utf-8")
    return 0


def cmd_kcd(args) -> int:
    ds, schema = _load(args)
    known = None
    if args.propensity.startswith("known:"):
        known = _read_propensities(args.propensity.split(":", 1)[1], ds.n)
    elif args.propensity != "logistic":
        raise UsageError(f"--propensity must be logistic or known:<path>, got {args.propensity!r}")
    cfg = KcdConfig(
        M=args.M, alpha=args.alpha, lam=args.lam, seed=args.seed, threads=args.threads, resample=args.resample
    )
    res = kcd_permutation_test(ds, cfg, propensity=known)
    payload = res.to_dict()
    payload["config"]["schema"] = schema.to_dict()
    _emit(_dumps(payload), args.out)
    return 0


def cmd_oracle_check(args) -> int:
    report = oracle_check(args.instances, args.seed)
    report["tolerance"] = ORACLE_TOL
    report["pass"] = bool(report["max"] < ORACLE_TOL)
    _emit(_dumps(report), args.out)
    return 0 if report["pass"] else EXIT_DOMAIN


COMMANDS = {
    "test": cmd_test,
    "band": cmd_band,
    "simulate": cmd_simulate,
    "kcd": cmd_kcd,
    "oracle-check": cmd_oracle_check,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"skcd: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        msg = str(exc) if str(exc).startswith("file not found") else f"file not found: {exc.filename}"
        print(f"skcd: {msg}", file=sys.stderr)
        return EXIT_USAGE
    except SKCDError as exc:
        print(f"skcd: error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
