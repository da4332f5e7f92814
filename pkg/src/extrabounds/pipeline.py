"""End-to-end bound estimation from pilot values.

``estimate_derivatives`` runs (optionally tuned) forest-weighted local
polynomial fits; ``xtrapolation_bounds`` feeds the result to the bound
assembly. ``fit_pilot`` provides a built-in regression-forest pilot.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .bounds import (BoundTable, DerivativeField, SampleSet, bounds_one_dim,
                     bounds_order_one, bounds_order_one_local)
from .forest import ForestParams, extract_weights, fit_poly_forest, fit_regression_forest, predict
from .locpol import penalized_locpol
from .tuning import TuningGrid, tune


@dataclass(frozen=True)
class XtraConfig:
    """Settings for derivative estimation and bound assembly.

    Parameters
    ----------
    q : int
        Derivative order of the bounds. ``q > 1`` needs one covariate.
    forest_params, penalty :
        When both are given tuning is skipped.
    grid : TuningGrid
        Used when ``forest_params`` or ``penalty`` is missing.
    n_anchors : int, optional
        Per-target nearest anchors; all samples by default.
    anchor_metric : {"euclidean", "gradient"}
    """

    q: int = 1
    forest_params: Optional[ForestParams] = None
    penalty: Optional[float] = None
    grid: TuningGrid = field(default_factory=TuningGrid)
    n_anchors: Optional[int] = None
    anchor_metric: str = "euclidean"

    def __post_init__(self) -> None:
        if int(self.q) < 1:
            raise ValueError("q must be at least 1")
        if self.n_anchors is not None and int(self.n_anchors) < 1:
            raise ValueError("n_anchors must be positive")


@dataclass(frozen=True)
class DirectionFit:
    params: ForestParams
    penalty: float
    derivatives: NDArray[np.float64]  # (n, q): orders 1..q
    mean_losses: Optional[NDArray[np.float64]] = None


def fit_direction(samples: SampleSet, v: ArrayLike, config: XtraConfig) -> DirectionFit:
    """Derivatives of orders ``1..q`` along ``v`` at every sample."""
    q = int(config.q)
    losses = None
    if config.forest_params is not None and config.penalty is not None:
        params, lam = config.forest_params, float(config.penalty)
        W = extract_weights(fit_poly_forest(samples, v, q, params))
    else:
        grid = config.grid
        if config.forest_params is not None:
            grid = replace(grid, forest_params=(config.forest_params,))
        if config.penalty is not None:
            grid = replace(grid, penalties=(float(config.penalty),))
        res = tune(samples, v, grid, q)
        params, lam, W, losses = res.params, res.penalty, res.weights, res.mean_losses
    coefs = penalized_locpol(samples, W, v, q, lam)
    D = np.column_stack([coefs.derivative(k) for k in range(1, q + 1)])
    return DirectionFit(params, lam, D, losses)


def estimate_derivatives(samples: SampleSet, config: XtraConfig = XtraConfig()
                         ) -> tuple[DerivativeField, list[DirectionFit]]:
    """Derivative field for the bounds: gradients for ``q = 1``, univariate
    derivatives ``1..q`` otherwise."""
    q = int(config.q)
    if q > 1:
        if samples.d != 1:
            raise ValueError("orders above one need a single covariate")
        fit = fit_direction(samples, [1.0], config)
        return DerivativeField.univariate(fit.derivatives), [fit]
    fits = [fit_direction(samples, np.eye(samples.d)[j], config) for j in range(samples.d)]
    return DerivativeField.gradients(np.column_stack([f.derivatives[:, 0] for f in fits])), fits


def bounds_from_derivatives(samples: SampleSet, derivs: DerivativeField, targets: ArrayLike,
                            config: XtraConfig = XtraConfig()) -> BoundTable:
    if derivs.mode == "one_dim" and derivs.order > 1:
        return bounds_one_dim(samples, derivs, targets, derivs.order)
    if config.n_anchors is not None and config.n_anchors < samples.n:
        return bounds_order_one_local(samples, derivs, targets, int(config.n_anchors),
                                      config.anchor_metric)
    return bounds_order_one(samples, derivs, targets)


def xtrapolation_bounds(samples: SampleSet, targets: ArrayLike,
                        config: XtraConfig = XtraConfig()) -> BoundTable:
    """Estimated extrapolation bounds at ``targets`` from pilot values."""
    derivs, _ = estimate_derivatives(samples, config)
    return bounds_from_derivatives(samples, derivs, targets, config)


def fit_pilot(covariates: ArrayLike, responses: ArrayLike,
              params: ForestParams = ForestParams()) -> NDArray[np.float64]:
    """In-sample predictions of a regression forest."""
    forest = fit_regression_forest(covariates, responses, params)
    return predict(forest)
