"""Extrapolation bounds for nonparametric regression estimates.

Bounds on a regression function outside the covariate support are built
from pilot predictions and forest-weighted local polynomial derivative
estimates. The package also provides prediction intervals, extrapolation
scores, a simulation harness and a command-line interface.
"""

from ._backend import BACKEND
from .bounds import (BoundTable, DerivativeField, SampleSet, bounds_one_dim, bounds_order_one,
                     bounds_order_one_local, clamp_bounds, select_anchors)
from .forest import (Forest, ForestParams, extract_weights, fit_poly_forest,
                     fit_regression_forest, load_forest, predict, predict_quantile, save_forest,
                     split_impurity, weight_factors)
from .inference import (BootstrapError, IntervalTable, ScoreTable,
                        bootstrap_confidence_interval, cv_residual_std, extrapolation_score,
                        interval_width_score, midpoint_prediction, prediction_interval)
from .locpol import (ConvergenceError, LocPolCoefficients, penalized_locpol, rf_loc_pol,
                     weighted_locpol)
from .pipeline import (XtraConfig, estimate_derivatives, fit_pilot, xtrapolation_bounds)
from .tuning import TuningGrid, TuningResult, select_from_losses, tune

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "BoundTable", "DerivativeField", "SampleSet", "bounds_one_dim",
    "bounds_order_one", "bounds_order_one_local", "clamp_bounds", "select_anchors",
    "Forest", "ForestParams", "extract_weights", "fit_poly_forest", "fit_regression_forest",
    "load_forest", "predict", "predict_quantile", "save_forest", "split_impurity",
    "weight_factors", "BootstrapError", "IntervalTable", "ScoreTable",
    "bootstrap_confidence_interval", "cv_residual_std", "extrapolation_score",
    "interval_width_score", "midpoint_prediction", "prediction_interval", "ConvergenceError",
    "LocPolCoefficients", "penalized_locpol", "rf_loc_pol", "weighted_locpol", "XtraConfig",
    "estimate_derivatives", "fit_pilot", "xtrapolation_bounds", "TuningGrid", "TuningResult",
    "select_from_losses", "tune",
]
