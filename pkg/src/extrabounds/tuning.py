"""Fold-based selection of forest settings and penalty.

The grid is ordered from most to least regularized along both axes. Among
all cells whose mean held-out loss lies within ``tol`` standard errors of the
best cell, the most regularized forest setting is chosen first and then the
most regularized penalty for it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import sparse

from .bounds import SampleSet
from .forest import ForestParams, fit_poly_forest, weight_factors
from .locpol import LocalSystem

# Grids used when the caller gives none.
DEFAULT_IMPURITY_TOLS = (100.0, 10.0, 1.0, 0.1, 0.01)
DEFAULT_PENALTIES = (10.0, 1.0, 0.1, 0.01, 0.001, 0.0)


@dataclass(frozen=True)
class TuningGrid:
    """Candidate settings, each axis ordered by decreasing regularization.

    Parameters
    ----------
    forest_params : tuple of ForestParams
    penalties : tuple of float
        Strictly decreasing.
    tol : float
        Width of the acceptance band in standard errors; ``inf`` always
        picks the first cell.
    folds : int
    loss : {"squared", "pinball"}
    alpha : float
        Level of the pinball loss.
    seed : int
        Seed of the fold permutation.
    """

    forest_params: tuple = field(default_factory=lambda: default_forest_grid())
    penalties: tuple = DEFAULT_PENALTIES
    tol: float = 1.0
    folds: int = 5
    loss: str = "squared"
    alpha: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        fp = tuple(self.forest_params)
        pen = tuple(float(p) for p in self.penalties)
        if len(fp) < 1 or len(pen) < 1:
            raise ValueError("tuning grid must be non-empty")
        if any(p < 0 or not np.isfinite(p) for p in pen):
            raise ValueError("penalties must be finite and non-negative")
        if any(a <= b for a, b in zip(pen, pen[1:])):
            raise ValueError("penalties must be strictly decreasing")
        if np.isnan(self.tol) or self.tol < 0:
            raise ValueError("tol must be non-negative")
        if int(self.folds) < 2:
            raise ValueError("at least two folds are required")
        if self.loss not in ("squared", "pinball"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        object.__setattr__(self, "forest_params", fp)
        object.__setattr__(self, "penalties", pen)


def default_forest_grid(base: ForestParams = ForestParams(),
                        impurity_tols: Sequence[float] = DEFAULT_IMPURITY_TOLS) -> tuple:
    """Default trees varying only the impurity tolerance (largest first)."""
    return tuple(base.with_(impurity_tol=float(t)) for t in impurity_tols)


@dataclass(frozen=True)
class TuningResult:
    params: ForestParams
    penalty: float
    k: int
    l: int
    mean_losses: NDArray[np.float64]
    losses: NDArray[np.float64]
    weights: Optional[NDArray[np.float64]] = None


def fold_indices(n: int, folds: int, seed: int) -> list[NDArray[np.intp]]:
    """Seeded permutation split into ``folds`` near-equal parts."""
    if n < folds:
        raise ValueError("fewer samples than folds")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(p) for p in np.array_split(perm, folds)]


def loss_values(pred: NDArray[np.float64], target: NDArray[np.float64], loss: str = "squared",
                alpha: float = 0.5) -> NDArray[np.float64]:
    r = target - pred
    if loss == "squared":
        return r * r
    if loss == "pinball":
        return np.maximum(alpha * r, (alpha - 1.0) * r)
    raise ValueError(f"unknown loss {loss!r}")


def select_from_losses(losses: ArrayLike, tol: float) -> tuple[int, int, NDArray[np.float64]]:
    """Apply the most-regularized-within-tolerance rule to a loss table.

    Parameters
    ----------
    losses : array_like of shape (K, L, n)
        Per-sample held-out losses of every grid cell.
    tol : float

    Returns
    -------
    k, l : int
        Zero-based selected indices.
    band : ndarray of shape (K, L)
        Boolean table of cells satisfying the tolerance inequality.
    """
    E = np.asarray(losses, dtype=np.float64)
    if E.ndim != 3 or E.shape[0] < 1 or E.shape[1] < 1 or E.shape[2] < 1:
        raise ValueError("loss table must have shape (K, L, n) with K, L, n >= 1")
    K, L, n = E.shape
    means = E.mean(axis=2)
    kb, lb = np.unravel_index(np.argmin(means), means.shape)  # first minimum in row-major order
    best = E[kb, lb]
    S = np.sqrt(np.mean((best[None, None, :] - E) ** 2, axis=2)) / np.sqrt(n)
    if np.isinf(tol):
        band = np.ones((K, L), dtype=bool)
    else:
        band = means <= means[kb, lb] + tol * S
    k_star = int(np.argmax(band.any(axis=1)))
    l_star = int(np.argmax(band[k_star]))
    return k_star, l_star, band


def holdout_losses(samples: SampleSet, v: NDArray[np.float64], q: int, W: NDArray[np.float64],
                   penalties: Sequence[float], folds: list, loss: str = "squared",
                   alpha: float = 0.5, factors=None) -> NDArray[np.float64]:
    """Per-sample held-out losses for one weight matrix, shape ``(L, n)``.

    For each fold the columns of held-out samples are removed from ``W`` and
    the degree-0 coefficient of the refit serves as the prediction at each
    held-out sample. Samples left without any retained neighbour are
    predicted by the retained pilot mean. ``factors`` are optional sparse
    factors of ``W`` passed on to the solver.
    """
    t = samples.covariates @ v
    y = samples.pilot
    pred = np.empty((len(penalties), samples.n))
    for idx in folds:
        keep = np.ones(samples.n, dtype=bool)
        keep[idx] = False
        Wm = W * keep[None, :]
        fm = None
        if factors is not None:
            A, R = factors
            fm = (A, sparse.diags(keep.astype(np.float64)) @ R)
        system = LocalSystem(t, y, Wm, q, fm)
        empty = Wm[idx].sum(axis=1) <= 0
        for ell, lam in enumerate(penalties):
            p = system.solve(float(lam))[idx, 0]
            pred[ell, idx] = np.where(empty, y[keep].mean(), p)
    return loss_values(pred, y[None, :], loss, alpha)


def tune(samples: SampleSet, v: ArrayLike, grid: TuningGrid = TuningGrid(), q: int = 1
         ) -> TuningResult:
    """Select forest settings and penalty for derivatives in direction ``v``.

    Each forest setting is fit once on all samples; its weight matrix is then
    reused for every penalty and fold. The returned result carries the
    weight matrix of the chosen setting.
    """
    v = np.asarray(v, dtype=np.float64).ravel()
    folds = fold_indices(samples.n, int(grid.folds), grid.seed)
    K, L = len(grid.forest_params), len(grid.penalties)
    E = np.empty((K, L, samples.n))
    mats = []
    for k, params in enumerate(grid.forest_params):
        A, R = weight_factors(fit_poly_forest(samples, v, q, params))
        W = np.asarray(A @ R.T.toarray())
        mats.append(W)
        E[k] = holdout_losses(samples, v, q, W, grid.penalties, folds, grid.loss, grid.alpha,
                              (A, R))
    k_star, l_star, _ = select_from_losses(E, grid.tol)
    return TuningResult(grid.forest_params[k_star], grid.penalties[l_star], k_star, l_star,
                        E.mean(axis=2), E, mats[k_star])
