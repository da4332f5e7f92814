"""Inference products built on bound tables.

Worst-case optimal point predictions, prediction intervals from quantile
bounds, percentile-bootstrap confidence intervals, the cross-validated
residual scale and extrapolation scores.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .bounds import BoundTable
from .forest import ForestParams, fit_regression_forest, predict
from .tuning import fold_indices

Fitter = Callable[[NDArray[np.float64], NDArray[np.float64], NDArray[np.float64]],
                  NDArray[np.float64]]
BoundsPipeline = Callable[[NDArray[np.float64], NDArray[np.float64], NDArray[np.float64]],
                          BoundTable]


class BootstrapError(RuntimeError):
    """Too many bootstrap replicates failed."""


@dataclass(frozen=True)
class IntervalTable:
    """Per-target interval ``[lo, hi]`` at nominal miscoverage ``alpha``."""

    targets: NDArray[np.float64]
    lo: NDArray[np.float64]
    hi: NDArray[np.float64]
    alpha: float
    crossed: Optional[NDArray[np.bool_]] = None

    def __post_init__(self) -> None:
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if np.any(self.lo > self.hi):
            raise ValueError("interval lower end exceeds upper end")
        if self.crossed is None:
            object.__setattr__(self, "crossed", np.zeros(self.lo.shape[0], dtype=bool))

    @property
    def n_crossed(self) -> int:
        return int(np.sum(self.crossed))

    def covers(self, values: ArrayLike) -> NDArray[np.bool_]:
        v = np.asarray(values, dtype=np.float64)
        return (self.lo <= v) & (v <= self.hi)


@dataclass(frozen=True)
class ScoreTable:
    """Extrapolation scores: bound width in units of the residual scale."""

    targets: NDArray[np.float64]
    score: NDArray[np.float64]
    sigma: float


def midpoint_prediction(bounds: BoundTable) -> NDArray[np.float64]:
    """Midpoint of the bounds, the minimax prediction under extrapolation."""
    return bounds.mid


def _same_targets(a: BoundTable, b: BoundTable) -> None:
    if a.targets.shape != b.targets.shape or not np.array_equal(a.targets, b.targets):
        raise ValueError("bound tables refer to different targets")


def prediction_interval(lower_quantile_bounds: BoundTable, upper_quantile_bounds: BoundTable,
                        alpha: float) -> IntervalTable:
    """Interval from bounds on the ``alpha/2`` and ``1 - alpha/2`` quantiles.

    The lower end is the lower bound of the lower quantile, the upper end the
    upper bound of the upper quantile. Crossing ends are replaced by their
    average and flagged.
    """
    _same_targets(lower_quantile_bounds, upper_quantile_bounds)
    lo = lower_quantile_bounds.lower.copy()
    hi = upper_quantile_bounds.upper.copy()
    crossed = lo > hi
    mid = 0.5 * (lo + hi)
    lo[crossed] = mid[crossed]
    hi[crossed] = mid[crossed]
    return IntervalTable(lower_quantile_bounds.targets, lo, hi, float(alpha), crossed)


def empirical_quantile(values: ArrayLike, level: float, axis: int = 0) -> NDArray[np.float64]:
    """Smallest order statistic whose cumulative mass reaches ``level``."""
    v = np.sort(np.asarray(values, dtype=np.float64), axis=axis)
    B = v.shape[axis]
    if B == 0:
        raise ValueError("no values")
    k = int(np.ceil(level * B - 1e-9)) - 1
    k = min(max(k, 0), B - 1)
    return np.take(v, k, axis=axis)


@dataclass(frozen=True)
class BootstrapReplicates:
    lower: NDArray[np.float64]  # (B_ok, m)
    upper: NDArray[np.float64]
    n_dropped: int


def bootstrap_replicates(covariates: ArrayLike, responses: ArrayLike, pipeline: BoundsPipeline,
                         targets: ArrayLike, B: int = 500, seed: int = 0,
                         max_drop_fraction: float = 0.2) -> BootstrapReplicates:
    """Rerun ``pipeline`` on ``B`` row resamples and collect the bounds.

    ``pipeline(X, y, targets)`` must return a :class:`BoundTable`. Replicates
    that raise are dropped; more than ``max_drop_fraction`` drops abort.
    """
    X = np.asarray(covariates, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(responses, dtype=np.float64).ravel()
    T = np.asarray(targets, dtype=np.float64)
    if int(B) < 2:
        raise ValueError("at least two bootstrap replicates are required")
    n = X.shape[0]
    los, ups, dropped = [], [], 0
    for b in range(int(B)):
        idx = np.random.default_rng([int(seed), b]).integers(0, n, n)
        try:
            table = pipeline(X[idx], y[idx], T)
        except (ValueError, ArithmeticError, RuntimeError, np.linalg.LinAlgError):
            dropped += 1
            if dropped > max_drop_fraction * B:
                raise BootstrapError(f"{dropped} of {B} bootstrap replicates failed")
            continue
        los.append(table.lower)
        ups.append(table.upper)
    return BootstrapReplicates(np.array(los), np.array(ups), dropped)


def bootstrap_confidence_interval(covariates: ArrayLike, responses: ArrayLike,
                                  pipeline: BoundsPipeline, targets: ArrayLike,
                                  alpha: float = 0.1, B: int = 500, seed: int = 0
                                  ) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Percentile-bootstrap interval for the extrapolation bounds.

    Returns the ``alpha/2`` quantile of the replicated lower bounds and the
    ``1 - alpha/2`` quantile of the replicated upper bounds, per target.
    """
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    reps = bootstrap_replicates(covariates, responses, pipeline, targets, B, seed)
    lo = empirical_quantile(reps.lower, alpha / 2)
    hi = empirical_quantile(reps.upper, 1 - alpha / 2)
    return lo, hi


def forest_fitter(params: ForestParams = ForestParams()) -> Fitter:
    """Fitter callable backed by the built-in regression forest."""

    def fit_predict(X_train, y_train, X_test):
        return predict(fit_regression_forest(X_train, y_train, params), X_test)

    return fit_predict


def cv_residual_std(covariates: ArrayLike, responses: ArrayLike,
                    fitter: Optional[Fitter] = None, folds: int = 5, seed: int = 0) -> float:
    """Square root of the fold-averaged held-out mean squared error.

    ``fitter(X_train, y_train, X_test)`` returns predictions at ``X_test``.
    """
    X = np.asarray(covariates, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(responses, dtype=np.float64).ravel()
    if int(folds) < 2:
        raise ValueError("at least two folds are required")
    fitter = forest_fitter() if fitter is None else fitter
    parts = fold_indices(X.shape[0], int(folds), seed)
    mses = []
    for idx in parts:
        keep = np.ones(X.shape[0], dtype=bool)
        keep[idx] = False
        if not np.any(keep):
            raise ValueError("degenerate fold leaves no training data")
        pred = np.asarray(fitter(X[keep], y[keep], X[idx]), dtype=np.float64)
        mses.append(np.mean((y[idx] - pred) ** 2))
    return float(np.sqrt(np.mean(mses)))


def extrapolation_score(bounds: BoundTable, sigma: float) -> ScoreTable:
    """Bound width divided by ``sigma``."""
    if not (np.isfinite(sigma) and sigma > 0):
        raise ValueError("sigma must be positive")
    return ScoreTable(bounds.targets, bounds.width / sigma, float(sigma))


def interval_width_score(lower_quantile_bounds: BoundTable,
                         upper_quantile_bounds: BoundTable) -> NDArray[np.float64]:
    """Summed bound widths of the two quantile tables."""
    _same_targets(lower_quantile_bounds, upper_quantile_bounds)
    return lower_quantile_bounds.width + upper_quantile_bounds.width
