"""Command-line interface.

Subcommands read CSV files with a header row (``x1..xd`` plus a value
column) and an optional JSON configuration. Command-line flags override
configuration values. Exit codes: 0 success, 2 invalid input, 3 failed
computation.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from importlib import resources
from typing import Optional, Sequence

import jsonschema
import numpy as np

from .bounds import BoundTable, SampleSet
from .forest import ForestParams, fit_regression_forest, predict, predict_quantile, save_forest
from .inference import cv_residual_std, extrapolation_score, forest_fitter, prediction_interval
from .pipeline import XtraConfig, bounds_from_derivatives, estimate_derivatives, fit_pilot
from .simlab import METRIC_COLUMNS, SimConfig, simulate, write_metrics_csv
from .tuning import DEFAULT_PENALTIES, TuningGrid, default_forest_grid, tune

DEFAULT_SEED = 20240229
CONFIG_VERSION = 1
FLOAT_FMT = "%.17g"

EXIT_OK, EXIT_INPUT, EXIT_COMPUTE = 0, 2, 3


class InputError(ValueError):
    """Malformed files, configuration or flags."""


# ---------------------------------------------------------------- config

def load_schema() -> dict:
    text = resources.files("extrabounds").joinpath("config_schema.json").read_text("utf-8")
    return json.loads(text)


def load_config(path: Optional[str]) -> dict:
    """Read and validate a JSON configuration; ``None`` gives the defaults."""
    if path is None:
        return {"version": CONFIG_VERSION}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"config {path} is not valid JSON: {exc}") from None
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    try:
        jsonschema.validate(cfg, load_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise InputError(f"config error at {where}: {exc.message}") from None


def _forest_params(entry: Optional[dict], seed: int, base: ForestParams = ForestParams()
                   ) -> ForestParams:
    params = base.with_(seed=seed)
    return params.with_(**entry) if entry else params


def xtra_config(cfg: dict, seed: int, loss: str = "squared", alpha: float = 0.5) -> XtraConfig:
    """Derivative-estimation settings from a validated configuration."""
    forest = _forest_params(cfg["forest"], seed) if "forest" in cfg else None
    if "forest_grid" in cfg:
        grid_forests = tuple(_forest_params(f, seed) for f in cfg["forest_grid"])
    else:
        grid_forests = default_forest_grid(ForestParams(seed=seed))
    penalties = tuple(sorted(set(cfg.get("penalties", DEFAULT_PENALTIES)), reverse=True))
    grid = TuningGrid(grid_forests, penalties, tol=float(cfg.get("tol", 1.0)),
                      folds=int(cfg.get("folds", 5)), loss=loss, alpha=alpha, seed=seed)
    return XtraConfig(q=int(cfg.get("q", 1)), forest_params=forest, penalty=cfg.get("penalty"),
                      grid=grid, n_anchors=cfg.get("n_anchors"),
                      anchor_metric=cfg.get("anchor_metric", "euclidean"))


# ---------------------------------------------------------------- CSV I/O

def read_table(path: str, value_column: Optional[str]) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Covariates ``x1..xd`` and, if requested, one value column."""
    try:
        with open(path, "r", newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    if not rows:
        raise InputError(f"{path}: missing header row")
    header = [h.strip() for h in rows[0]]
    xcols = [h for h in header if h.startswith("x")]
    d = len(xcols)
    if d == 0 or xcols != [f"x{j}" for j in range(1, d + 1)]:
        raise InputError(f"{path}: header must start with columns x1..xd, got {header}")
    if value_column is not None and value_column not in header:
        raise InputError(f"{path}: missing column {value_column!r}")
    pos = [header.index(c) for c in xcols]
    vpos = None if value_column is None else header.index(value_column)
    data = [r for r in rows[1:] if any(c.strip() for c in r)]
    X = np.empty((len(data), d))
    v = None if vpos is None else np.empty(len(data))
    for i, r in enumerate(data):
        if len(r) != len(header):
            raise InputError(f"{path}: row {i + 2} has {len(r)} fields, expected {len(header)}")
        try:
            X[i] = [float(r[p]) for p in pos]
            if v is not None:
                v[i] = float(r[vpos])
        except ValueError:
            raise InputError(f"{path}: row {i + 2} is not numeric") from None
    if not (np.all(np.isfinite(X)) and (v is None or np.all(np.isfinite(v)))):
        raise InputError(f"{path}: non-finite values")
    return X, v


def write_table(path: str, X: np.ndarray, columns: dict) -> None:
    """Write ``x1..xd`` followed by named columns."""
    d = X.shape[1]
    names = [f"x{j}" for j in range(1, d + 1)] + list(columns)
    cols = [np.asarray(c) for c in columns.values()]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for i in range(X.shape[0]):
            row = [FLOAT_FMT % x for x in X[i]]
            for c in cols:
                val = c[i]
                row.append(str(int(val)) if c.dtype == bool else FLOAT_FMT % val)
            w.writerow(row)


def _bounds_columns(table: BoundTable) -> dict:
    return {"lower": table.lower, "upper": table.upper, "mid": table.mid,
            "width": table.width, "clamped": table.clamped}


def _empty_bounds(d: int) -> BoundTable:
    z = np.empty(0)
    return BoundTable(np.empty((0, d)), z, z, np.zeros(0, dtype=bool))


def _check_dims(X: np.ndarray, T: np.ndarray, path: str) -> None:
    if T.shape[1] != X.shape[1]:
        raise InputError(f"{path}: {T.shape[1]} covariates, training data has {X.shape[1]}")


# ---------------------------------------------------------------- commands

def _estimate_bounds(samples: SampleSet, targets: np.ndarray, xtra: XtraConfig) -> BoundTable:
    if targets.shape[0] == 0:
        return _empty_bounds(samples.d)
    derivs, _ = estimate_derivatives(samples, xtra)
    return bounds_from_derivatives(samples, derivs, targets, xtra)


def cmd_pilot(args, cfg: dict) -> None:
    X, y = read_table(args.train, "y")
    if X.shape[0] == 0:
        raise InputError(f"{args.train}: no data rows")
    params = _forest_params(cfg.get("pilot_forest"), args.seed)
    forest = fit_regression_forest(X, y, params)
    cols = {"pilot": predict(forest)}
    if args.quantiles:
        alpha = float(cfg.get("alpha", 0.1))
        cols["pilot_qlo"] = predict_quantile(forest, None, X, alpha / 2)
        cols["pilot_qhi"] = predict_quantile(forest, None, X, 1 - alpha / 2)
    write_table(args.out, X, cols)
    if args.forest_out:
        save_forest(forest, args.forest_out)


def cmd_bounds(args, cfg: dict) -> None:
    X, pilot = read_table(args.pilot, args.column)
    T, _ = read_table(args.targets, None)
    _check_dims(X, T, args.targets)
    table = _estimate_bounds(SampleSet(X, pilot), T, xtra_config(cfg, args.seed))
    write_table(args.out, T, _bounds_columns(table))


def cmd_intervals(args, cfg: dict) -> None:
    X, y = read_table(args.train, "y")
    T, _ = read_table(args.targets, None)
    _check_dims(X, T, args.targets)
    alpha = float(cfg.get("alpha", 0.1))
    forest = fit_regression_forest(X, y, _forest_params(cfg.get("pilot_forest"), args.seed))
    tables = []
    for level in (alpha / 2, 1 - alpha / 2):
        pilot = predict_quantile(forest, None, X, level)
        xtra = xtra_config(cfg, args.seed, loss="pinball", alpha=level)
        tables.append(_estimate_bounds(SampleSet(X, pilot), T, xtra))
    iv = prediction_interval(tables[0], tables[1], alpha)
    write_table(args.out, T, {"lo": iv.lo, "hi": iv.hi, "crossed": iv.crossed})


def cmd_score(args, cfg: dict) -> None:
    X, y = read_table(args.train, "y")
    T, _ = read_table(args.targets, None)
    _check_dims(X, T, args.targets)
    params = _forest_params(cfg.get("pilot_forest"), args.seed)
    sigma = args.sigma if args.sigma is not None else cfg.get("sigma")
    if sigma is None:
        sigma = cv_residual_std(X, y, forest_fitter(params), int(cfg.get("folds", 5)), args.seed)
    pilot = fit_pilot(X, y, params)
    table = _estimate_bounds(SampleSet(X, pilot), T, xtra_config(cfg, args.seed))
    score = extrapolation_score(table, float(sigma))
    write_table(args.out, T, {"score": score.score, "width": table.width})


def cmd_tune(args, cfg: dict) -> None:
    X, pilot = read_table(args.pilot, args.column)
    samples = SampleSet(X, pilot)
    xtra = xtra_config(cfg, args.seed)
    q = xtra.q
    dirs = [np.array([1.0])] if q > 1 else list(np.eye(samples.d))
    if q > 1 and samples.d != 1:
        raise InputError("q > 1 needs a single covariate")
    out = []
    for v in dirs:
        res = tune(samples, v, xtra.grid, q)
        fp = asdict(res.params)
        fp.pop("seed")
        out.append({"direction": v.tolist(), "forest": fp, "penalty": res.penalty,
                    "forest_index": res.k, "penalty_index": res.l,
                    "mean_losses": res.mean_losses.tolist()})
    text = json.dumps({"version": CONFIG_VERSION, "seed": args.seed, "directions": out},
                      indent=2, sort_keys=True)
    if args.out == "-":
        print(text)
    else:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")


def _simulate_one(job):
    n, d, reps, seed, config = job
    return simulate([n], d, reps, seed, config)


def cmd_simulate(args, cfg: dict) -> None:
    sim = dict(cfg.get("simulate", {}))
    for key in ("d", "reps", "n_eval"):
        if getattr(args, key) is not None:
            sim[key] = getattr(args, key)
    if args.ns:
        sim["ns"] = args.ns
    ns = [int(n) for n in sim.get("ns", [100, 400, 1600])]
    d, reps = int(sim.get("d", 2)), int(sim.get("reps", 20))
    if min(ns) < 5 or d < 1 or reps < 1:
        raise InputError("simulate needs n >= 5, d >= 1 and reps >= 1")
    config = SimConfig(n_eval=int(sim.get("n_eval", 200)), noise_sd=float(sim.get("noise_sd", 0.1)),
                       pilot_params=_forest_params(cfg.get("pilot_forest"), args.seed),
                       xtra=xtra_config(cfg, args.seed), sigma_folds=int(cfg.get("folds", 5)))
    if args.threads > 1:
        # replicate seeds depend only on (seed, r), so splitting by n keeps results identical
        jobs = [(n, d, reps, args.seed, config) for n in ns]
        with ProcessPoolExecutor(max_workers=args.threads) as pool:
            rows = [r for part in pool.map(_simulate_one, jobs) for r in part]
    else:
        rows = simulate(ns, d, reps, args.seed, config)
    write_metrics_csv(rows, args.out, METRIC_COLUMNS)


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="extrabounds",
                                     description="Extrapolation bounds from pilot estimates.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--seed", type=int, default=None,
                       help=f"random seed (default {DEFAULT_SEED})")
        p.add_argument("--threads", type=int, default=None, help="worker processes (default 1)")
        p.add_argument("--out", required=True, help="output path")
        return p

    p = common(sub.add_parser("pilot", help="fit the regression-forest pilot"))
    p.add_argument("--train", required=True, help="CSV with x1..xd,y")
    p.add_argument("--quantiles", action="store_true",
                   help="add quantile pilots at alpha/2 and 1-alpha/2")
    p.add_argument("--alpha", type=float)
    p.add_argument("--forest-out", help="write the fitted forest here")
    p.set_defaults(func=cmd_pilot)

    p = common(sub.add_parser("bounds", help="extrapolation bounds from pilot values"))
    p.add_argument("--pilot", required=True, help="CSV with x1..xd and the pilot column")
    p.add_argument("--column", default="pilot", help="pilot column name")
    p.add_argument("--targets", required=True, help="CSV with x1..xd")
    _add_xtra_flags(p)
    p.set_defaults(func=cmd_bounds)

    p = common(sub.add_parser("intervals", help="extrapolation-aware prediction intervals"))
    p.add_argument("--train", required=True)
    p.add_argument("--targets", required=True)
    p.add_argument("--alpha", type=float)
    _add_xtra_flags(p)
    p.set_defaults(func=cmd_intervals)

    p = common(sub.add_parser("score", help="extrapolation scores"))
    p.add_argument("--train", required=True)
    p.add_argument("--targets", required=True)
    p.add_argument("--sigma", type=float, help="residual scale; skips cross-validation")
    _add_xtra_flags(p)
    p.set_defaults(func=cmd_score)

    p = common(sub.add_parser("tune", help="select forest settings and penalty"))
    p.add_argument("--pilot", required=True)
    p.add_argument("--column", default="pilot")
    _add_xtra_flags(p)
    p.set_defaults(func=cmd_tune)

    p = common(sub.add_parser("simulate", help="piecewise-linear simulation study"))
    p.add_argument("--ns", type=int, nargs="+")
    p.add_argument("--d", type=int)
    p.add_argument("--reps", type=int)
    p.add_argument("--n-eval", dest="n_eval", type=int)
    _add_xtra_flags(p)
    p.set_defaults(func=cmd_simulate)
    return parser


def _add_xtra_flags(p) -> None:
    p.add_argument("--q", type=int)
    p.add_argument("--penalty", type=float, help="fixed penalty (skips penalty tuning)")
    p.add_argument("--n-anchors", dest="n_anchors", type=int)
    p.add_argument("--folds", type=int)
    p.add_argument("--tol", type=float)


_FLAG_KEYS = ("q", "penalty", "n_anchors", "folds", "tol", "alpha")


def merge_flags(cfg: dict, args) -> dict:
    """Configuration with flag values applied on top, validated again."""
    out = dict(cfg)
    for key in _FLAG_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            out[key] = val
    out["seed"] = args.seed if args.seed is not None else cfg.get("seed", DEFAULT_SEED)
    out["threads"] = args.threads if args.threads is not None else cfg.get("threads", 1)
    validate_config(out)
    args.seed, args.threads = out["seed"], out["threads"]
    return out


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = merge_flags(load_config(args.config), args)
    except InputError as exc:
        print(f"extrabounds: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    try:
        args.func(args, cfg)
    except InputError as exc:
        print(f"extrabounds: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ValueError, ArithmeticError, RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"extrabounds: computation failed: {exc}", file=sys.stderr)
        return EXIT_COMPUTE
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
