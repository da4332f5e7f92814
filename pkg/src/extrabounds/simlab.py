"""Simulation lab with piecewise-linear ground truth.

Each coordinate of ``[-2, 2]^d`` loses one of the four unit intervals
``[-2,-1), [-1,0), [0,1), [1,2]``; the product of what remains is the
observed support. The regression function is continuous and piecewise
linear in the first coordinate. The slope on the removed first-coordinate
interval copies one of the observed slopes, so the observed derivatives
dominate everywhere.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .bounds import BoundTable, DerivativeField, SampleSet, bounds_order_one
from .forest import ForestParams
from .inference import cv_residual_std, forest_fitter
from .pipeline import XtraConfig, bounds_from_derivatives, estimate_derivatives, fit_pilot

BREAKPOINTS = (-1.0, 0.0, 1.0)
INTERVAL_LEFT = np.array([-2.0, -1.0, 0.0, 1.0])


@dataclass(frozen=True)
class SimModel:
    """Piecewise-linear model on ``[-2, 2]^d``.

    Attributes
    ----------
    d : int
    removed : tuple of int
        Zero-based index of the interval removed from each coordinate;
        ``removed[0]`` is the left-out interval of the first coordinate.
    slopes, intercepts : ndarray of shape (4,)
        Unscaled pieces ``s_k x + c_k``.
    scale : float
        Multiplier making ``Var f(U) = 1`` for ``U`` uniform on the cube.
    noise_sd : float
    """

    d: int
    removed: tuple
    slopes: NDArray[np.float64]
    intercepts: NDArray[np.float64]
    scale: float
    noise_sd: float = 0.1

    @property
    def left_out(self) -> int:
        return int(self.removed[0])

    @property
    def identifiable(self) -> bool:
        """Removed inner interval carrying an extreme observed slope."""
        j = self.left_out
        if j not in (1, 2):
            return False
        observed = np.delete(self.slopes, j)
        return bool(self.slopes[j] == observed.max() or self.slopes[j] == observed.min())


def interval_index(x: ArrayLike) -> NDArray[np.intp]:
    """Index of the unit interval containing ``x`` (2 belongs to the last)."""
    return np.minimum(np.floor(np.asarray(x, dtype=np.float64) + 2.0), 3).astype(np.intp)


def intercepts_from_slopes(slopes: ArrayLike) -> NDArray[np.float64]:
    """Intercepts making the pieces continuous with value 0 at ``-2``."""
    s = np.asarray(slopes, dtype=np.float64)
    c = np.empty(4)
    c[0] = 2.0 * s[0]
    for k, t in enumerate(BREAKPOINTS):
        c[k + 1] = c[k] + (s[k] - s[k + 1]) * t
    return c


def piecewise_variance(slopes: ArrayLike, intercepts: ArrayLike) -> float:
    """Variance of the unscaled function under the uniform law on ``[-2, 2]``."""
    s = np.asarray(slopes, dtype=np.float64)
    c = np.asarray(intercepts, dtype=np.float64)
    a = INTERVAL_LEFT
    b = a + 1.0
    m1 = np.sum(s * (b**2 - a**2) / 2 + c * (b - a)) / 4.0
    m2 = np.sum(s**2 * (b**3 - a**3) / 3 + s * c * (b**2 - a**2) + c**2 * (b - a)) / 4.0
    return float(m2 - m1 * m1)


def model_from_slopes(slopes: ArrayLike, removed: Sequence[int], noise_sd: float = 0.1
                      ) -> SimModel:
    s = np.asarray(slopes, dtype=np.float64).copy()
    c = intercepts_from_slopes(s)
    var = piecewise_variance(s, c)
    scale = 1.0 / np.sqrt(var) if var > 0 else 1.0
    return SimModel(len(removed), tuple(int(r) for r in removed), s, c, float(scale),
                    float(noise_sd))


def gen_sim_model(d: int, seed: int, noise_sd: float = 0.1) -> SimModel:
    """Random support and slopes.

    Removed intervals are drawn uniformly with replacement per coordinate.
    Observed slopes are uniform on ``[-10, 10]``; the slope of the removed
    first-coordinate interval copies a uniformly chosen observed one.
    """
    if int(d) < 1:
        raise ValueError("d must be at least 1")
    rng = np.random.default_rng(seed)
    removed = rng.integers(0, 4, int(d))
    j = int(removed[0])
    s = np.empty(4)
    observed = [k for k in range(4) if k != j]
    s[observed] = rng.uniform(-10.0, 10.0, 3)
    s[j] = s[observed[int(rng.integers(0, 3))]]
    return model_from_slopes(s, removed, noise_sd)


def _as_points(model: SimModel, x: ArrayLike) -> NDArray[np.float64]:
    X = np.asarray(x, dtype=np.float64)
    if X.ndim == 0:
        X = X.reshape(1, 1)
    elif X.ndim == 1:
        X = X.reshape(1, -1) if model.d > 1 or X.size == 1 else X[:, None]
    if X.shape[1] != model.d:
        raise ValueError(f"points must have {model.d} coordinates")
    if np.any(np.abs(X) > 2.0):
        raise ValueError("points must lie in [-2, 2]^d")
    return X


def eval_piecewise_f(model: SimModel, x: ArrayLike) -> NDArray[np.float64] | float:
    """Regression function at ``x`` (a single point returns a float)."""
    single = np.ndim(x) <= 1 and (model.d > 1 or np.ndim(x) == 0)
    X = _as_points(model, x)
    k = interval_index(X[:, 0])
    out = model.scale * (model.slopes[k] * X[:, 0] + model.intercepts[k])
    return float(out[0]) if single else out


def true_gradients(model: SimModel, x: ArrayLike) -> NDArray[np.float64]:
    X = _as_points(model, x)
    G = np.zeros_like(X)
    G[:, 0] = model.scale * model.slopes[interval_index(X[:, 0])]
    return G


def in_support(model: SimModel, x: ArrayLike) -> NDArray[np.bool_]:
    X = _as_points(model, x)
    return np.all(interval_index(X) != np.asarray(model.removed)[None, :], axis=1)


def sample_support(model: SimModel, n: int, rng: np.random.Generator) -> NDArray[np.float64]:
    """Uniform draws on the observed support by the inverse measure map."""
    u = rng.uniform(0.0, 3.0, (int(n), model.d))
    x = u - 2.0
    cut = INTERVAL_LEFT[np.asarray(model.removed)][None, :]
    return np.where(x >= cut, x + 1.0, x)


def sample_outside(model: SimModel, n: int, rng: np.random.Generator) -> NDArray[np.float64]:
    """Uniform draws on the cube minus the observed support (rejection)."""
    out = np.empty((0, model.d))
    while out.shape[0] < n:
        cand = rng.uniform(-2.0, 2.0, (max(4 * (n - out.shape[0]), 16), model.d))
        out = np.vstack([out, cand[~in_support(model, cand)]])
    return out[:n]


def sample_dataset(model: SimModel, n: int, seed: int
                   ) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Covariates uniform on the support and noisy responses."""
    if int(n) < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    X = sample_support(model, n, rng)
    y = eval_piecewise_f(model, X) + model.noise_sd * rng.standard_normal(int(n))
    return X, y


def oracle_bounds(model: SimModel, anchors: ArrayLike, targets: ArrayLike) -> BoundTable:
    """Bounds from the exact function and gradients at the anchor points."""
    A = _as_points(model, anchors)
    samples = SampleSet(A, eval_piecewise_f(model, A))
    return bounds_order_one(samples, DerivativeField.gradients(true_gradients(model, A)),
                            _as_points(model, targets))


def _check_aligned(a: BoundTable, b: BoundTable) -> None:
    if len(a) != len(b):
        raise ValueError("tables differ in length")


def rmse_vs_oracle(estimated: BoundTable, oracle: BoundTable) -> float:
    """RMSE of the lower bounds plus RMSE of the upper bounds."""
    _check_aligned(estimated, oracle)
    return float(np.sqrt(np.mean((estimated.lower - oracle.lower) ** 2))
                 + np.sqrt(np.mean((estimated.upper - oracle.upper) ** 2)))


def worst_case_rmse(predictions: ArrayLike, oracle: BoundTable, noise_sd: float) -> float:
    """Mean over targets of the error against the least favourable truth."""
    p = np.asarray(predictions, dtype=np.float64).ravel()
    if p.shape[0] != len(oracle):
        raise ValueError("predictions and oracle differ in length")
    dev = np.maximum((oracle.upper - p) ** 2, (oracle.lower - p) ** 2)
    return float(np.mean(np.sqrt(dev + noise_sd**2)))


def euclidean_score(samples: ArrayLike, target: ArrayLike) -> NDArray[np.float64] | float:
    """Distance from each target to its nearest sample."""
    S = np.asarray(samples, dtype=np.float64)
    if S.ndim == 1:
        S = S[:, None]
    if S.shape[0] == 0:
        raise ValueError("no samples")
    T = np.asarray(target, dtype=np.float64)
    single = T.ndim <= 1 and (S.shape[1] > 1 or T.ndim == 0)
    T = T.reshape(-1, S.shape[1])
    out = np.empty(T.shape[0])
    for s in range(0, T.shape[0], 256):
        diff = T[s:s + 256, None, :] - S[None, :, :]
        out[s:s + 256] = np.sqrt(np.min(np.sum(diff * diff, axis=2), axis=1))
    return float(out[0]) if single else out


def cumulative_rmse_curve(scores: ArrayLike, predictions: ArrayLike, truth: ArrayLike,
                          thresholds: Iterable[float]) -> list[tuple[float, float]]:
    """Fraction retained and RMSE among points with score at most each threshold.

    Thresholds selecting no point are skipped.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    e = np.asarray(predictions, dtype=np.float64).ravel() - np.asarray(truth, dtype=np.float64).ravel()
    if s.shape != e.shape:
        raise ValueError("scores, predictions and truth must align")
    curve = []
    for lam in thresholds:
        keep = s <= lam
        if np.any(keep):
            curve.append((float(np.mean(keep)), float(np.sqrt(np.mean(e[keep] ** 2)))))
    return curve


def retained_fraction(scores: ArrayLike, predictions: ArrayLike, truth: ArrayLike,
                      level: float) -> float:
    """Largest fraction of lowest-score points whose cumulative RMSE stays at ``level``.

    Points are added in increasing score order (ties by position); the
    returned fraction is ``k/N`` for the largest ``k`` with RMSE of the
    first ``k`` points at most ``level``.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    e = np.asarray(predictions, dtype=np.float64).ravel() - np.asarray(truth, dtype=np.float64).ravel()
    order = np.argsort(s, kind="stable")
    cum = np.sqrt(np.cumsum(e[order] ** 2) / np.arange(1, s.shape[0] + 1))
    ok = np.nonzero(cum <= level)[0]
    return 0.0 if ok.shape[0] == 0 else float((ok[-1] + 1) / s.shape[0])


@dataclass(frozen=True)
class SimConfig:
    """Settings of one simulated replicate.

    Parameters
    ----------
    n_eval : int
        Evaluation points drawn on each of the support and its complement.
    pilot_params : ForestParams
        Built-in regression-forest pilot.
    xtra : XtraConfig
        Derivative estimation and bound assembly.
    sigma_folds : int
        Folds of the residual-scale estimate.
    """

    n_eval: int = 200
    noise_sd: float = 0.1
    pilot_params: ForestParams = field(default_factory=ForestParams)
    xtra: XtraConfig = field(default_factory=XtraConfig)
    sigma_folds: int = 5


@dataclass(frozen=True)
class Replicate:
    """Everything one simulated replicate produces."""

    model: SimModel
    covariates: NDArray[np.float64]
    responses: NDArray[np.float64]
    pilot: NDArray[np.float64]
    gradients: NDArray[np.float64]
    eval_in: NDArray[np.float64]
    eval_out: NDArray[np.float64]
    est_in: BoundTable
    est_out: BoundTable
    oracle_in: BoundTable
    oracle_out: BoundTable
    sigma: float

    def metrics(self) -> dict:
        return {
            "identifiable": int(self.model.identifiable),
            "rmse_in": rmse_vs_oracle(self.est_in, self.oracle_in),
            "rmse_out": rmse_vs_oracle(self.est_out, self.oracle_out),
            "worst_case_rmse_in": worst_case_rmse(self.est_in.mid, self.oracle_in,
                                                  self.model.noise_sd),
            "worst_case_rmse_out": worst_case_rmse(self.est_out.mid, self.oracle_out,
                                                   self.model.noise_sd),
            "sigma": self.sigma,
            "median_score_in": float(np.median(self.est_in.width / self.sigma)),
            "median_score_out": float(np.median(self.est_out.width / self.sigma)),
        }


def run_replicate(d: int, n: int, seed: int, config: SimConfig = SimConfig()) -> Replicate:
    """Draw a model and data, fit the pilot, estimate bounds and oracles."""
    model = gen_sim_model(d, seed, config.noise_sd)
    X, y = sample_dataset(model, n, seed + 1)
    params = config.pilot_params.with_(seed=seed)
    pilot = fit_pilot(X, y, params)
    samples = SampleSet(X, pilot)
    derivs, _ = estimate_derivatives(samples, config.xtra)
    rng = np.random.default_rng([seed, 2])
    ev_in = sample_support(model, config.n_eval, rng)
    ev_out = sample_outside(model, config.n_eval, rng)
    est_in = bounds_from_derivatives(samples, derivs, ev_in, config.xtra)
    est_out = bounds_from_derivatives(samples, derivs, ev_out, config.xtra)
    sigma = cv_residual_std(X, y, forest_fitter(params), config.sigma_folds, seed)
    return Replicate(model, X, y, pilot, derivs.values, ev_in, ev_out, est_in, est_out,
                     oracle_bounds(model, X, ev_in), oracle_bounds(model, X, ev_out), sigma)


METRIC_COLUMNS = ("n", "d", "seed", "method", "identifiable", "rmse_in", "rmse_out",
                  "worst_case_rmse_in", "worst_case_rmse_out", "sigma",
                  "median_score_in", "median_score_out")


def simulate(ns: Sequence[int], d: int, reps: int, seed: int = 0,
             config: SimConfig = SimConfig()) -> list[dict]:
    """Metric rows for every ``(n, replicate)`` pair."""
    rows = []
    for n in ns:
        for r in range(int(reps)):
            rep_seed = int(seed) * 1_000_003 + 7919 * r
            rep = run_replicate(d, int(n), rep_seed, config)
            rows.append({"n": int(n), "d": int(d), "seed": rep_seed, "method": "rf",
                         **rep.metrics()})
    return rows


def write_metrics_csv(rows: Sequence[dict], path: str, columns: Optional[Sequence[str]] = None
                      ) -> None:
    cols = list(columns or METRIC_COLUMNS)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in rows:
            w.writerow([f"{row[c]:.17g}" if isinstance(row[c], float) else row[c] for c in cols])
