"""Lower and upper extrapolation bounds from pilot values and derivatives.

A bound at a target is assembled from Taylor expansions anchored at the
observed samples. The highest-order term is replaced by its worst case over
the derivative values observed at all samples, and the tightest envelope over
anchors is kept.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import factorial
from typing import Optional, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial import ConvexHull, QhullError

from ._backend import kernels

ORDER_ONE = "order_one"
ONE_DIM = "one_dim"


def _as_matrix(a: ArrayLike, name: str) -> NDArray[np.float64]:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a 2-d array")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return np.ascontiguousarray(arr)


@dataclass(frozen=True)
class SampleSet:
    """Observed covariates paired with pilot predictions.

    Attributes
    ----------
    covariates : ndarray of shape (n, d)
    pilot : ndarray of shape (n,)
        Pilot regression values at the covariate rows.
    """

    covariates: NDArray[np.float64]
    pilot: NDArray[np.float64]

    def __post_init__(self) -> None:
        X = _as_matrix(self.covariates, "covariates")
        y = np.ascontiguousarray(np.asarray(self.pilot, dtype=np.float64).ravel())
        if X.shape[0] < 1:
            raise ValueError("at least one sample is required")
        if y.shape[0] != X.shape[0]:
            raise ValueError("pilot length does not match the number of covariate rows")
        if not np.all(np.isfinite(y)):
            raise ValueError("pilot contains non-finite entries")
        object.__setattr__(self, "covariates", X)
        object.__setattr__(self, "pilot", y)

    @property
    def n(self) -> int:
        return self.covariates.shape[0]

    @property
    def d(self) -> int:
        return self.covariates.shape[1]


@dataclass(frozen=True)
class DerivativeField:
    """Estimated derivatives at every sample.

    In ``order_one`` mode ``values[i, j]`` is the partial derivative in
    coordinate ``j`` at sample ``i``. In ``one_dim`` mode ``values[i, k-1]``
    is the ``k``-th derivative at sample ``i`` for ``k = 1..order``.
    """

    values: NDArray[np.float64]
    order: int
    mode: str

    def __post_init__(self) -> None:
        if self.mode not in (ORDER_ONE, ONE_DIM):
            raise ValueError(f"unknown derivative mode {self.mode!r}")
        if int(self.order) < 1:
            raise ValueError("derivative order must be at least 1")
        vals = _as_matrix(self.values, "derivative values")
        if self.mode == ORDER_ONE and self.order != 1:
            raise ValueError("order-one mode requires order 1")
        if self.mode == ONE_DIM and vals.shape[1] != self.order:
            raise ValueError(
                f"one-dimensional mode needs {self.order} derivative columns, got {vals.shape[1]}"
            )
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "order", int(self.order))

    @classmethod
    def gradients(cls, values: ArrayLike) -> "DerivativeField":
        """Order-one field from an (n, d) gradient matrix."""
        return cls(values=values, order=1, mode=ORDER_ONE)

    @classmethod
    def univariate(cls, values: ArrayLike) -> "DerivativeField":
        """One-dimensional field from an (n, q) matrix of derivatives 1..q."""
        vals = _as_matrix(values, "derivative values")
        return cls(values=vals, order=vals.shape[1], mode=ONE_DIM)


@dataclass(frozen=True)
class BoundTable:
    """Per-target lower/upper bounds after clamping."""

    targets: NDArray[np.float64]
    lower: NDArray[np.float64]
    upper: NDArray[np.float64]
    clamped: NDArray[np.bool_] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        T = np.asarray(self.targets, dtype=np.float64)
        if T.ndim == 1:
            T = T[:, None]
        lo = np.asarray(self.lower, dtype=np.float64).ravel()
        up = np.asarray(self.upper, dtype=np.float64).ravel()
        if lo.shape != up.shape or lo.shape[0] != T.shape[0]:
            raise ValueError("targets, lower and upper must share their length")
        cl = (np.zeros(lo.shape[0], dtype=bool) if self.clamped is None
              else np.asarray(self.clamped, dtype=bool).ravel())
        if np.any(lo > up):
            raise ValueError("lower bound exceeds upper bound")
        object.__setattr__(self, "targets", T)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", up)
        object.__setattr__(self, "clamped", cl)

    @property
    def mid(self) -> NDArray[np.float64]:
        return 0.5 * (self.lower + self.upper)

    @property
    def width(self) -> NDArray[np.float64]:
        return self.upper - self.lower

    def __len__(self) -> int:
        return self.lower.shape[0]


def clamp_bounds(raw_lower: float, raw_upper: float) -> tuple[float, float, bool]:
    """Resolve crossing bounds by collapsing both to their midpoint.

    >>> clamp_bounds(3.0, 1.0)
    (2.0, 2.0, True)
    """
    lo, up = float(raw_lower), float(raw_upper)
    if not (np.isfinite(lo) and np.isfinite(up)):
        raise ValueError("bounds must be finite")
    if lo <= up:
        return lo, up, False
    m = 0.5 * (lo + up)
    return m, m, True


def _clamp_arrays(lo: NDArray[np.float64], up: NDArray[np.float64]):
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(up))):
        raise ValueError("bounds must be finite")
    crossed = lo > up
    mid = 0.5 * (lo + up)
    return np.where(crossed, mid, lo), np.where(crossed, mid, up), crossed


def _check_targets(targets: ArrayLike, d: int) -> NDArray[np.float64]:
    T = np.asarray(targets, dtype=np.float64)
    if T.ndim == 1:
        T = T.reshape(-1, d) if d > 1 or T.size == 0 else T[:, None]
    if T.ndim != 2 or T.shape[1] != d:
        raise ValueError(f"targets must have {d} columns")
    if not np.all(np.isfinite(T)):
        raise ValueError("targets contain non-finite entries")
    return np.ascontiguousarray(T)


def _check_anchors(anchor_subset: Optional[Sequence[int]], n: int) -> NDArray[np.intp]:
    if anchor_subset is None:
        return np.arange(n, dtype=np.intp)
    a = np.asarray(anchor_subset, dtype=np.intp).ravel()
    if a.shape[0] == 0:
        raise ValueError("anchor subset is empty")
    if np.any(a < 0) or np.any(a >= n):
        raise ValueError("anchor index out of range")
    return np.ascontiguousarray(a)


def extreme_gradient_rows(grads: NDArray[np.float64]) -> NDArray[np.float64]:
    """Rows of ``grads`` that can attain a min or max of a linear functional.

    Any linear functional reaches its extremes over a finite point set at a
    vertex of the convex hull, so the remaining rows never change the bounds.
    Falls back to the distinct rows when the hull is degenerate.
    """
    g = np.unique(grads, axis=0)
    n, d = g.shape
    if d == 1:
        return np.array([[g[0, 0]], [g[-1, 0]]]) if n > 1 else g
    if n <= d + 1:
        return g
    try:
        hull = ConvexHull(g)
    except (QhullError, ValueError):
        return g
    return np.ascontiguousarray(g[np.sort(hull.vertices)])


def bounds_order_one(
    samples: SampleSet,
    derivs: DerivativeField,
    targets: ArrayLike,
    anchor_subset: Optional[Sequence[int]] = None,
    reduce_hull: bool = True,
) -> BoundTable:
    """First-order extrapolation bounds for multivariate covariates.

    Parameters
    ----------
    samples : SampleSet
    derivs : DerivativeField
        Gradients in order-one mode.
    targets : array_like of shape (m, d)
    anchor_subset : sequence of int, optional
        Anchors for the outer max/min. The worst-case derivative always
        ranges over every sample.
    reduce_hull : bool
        Restrict the inner min/max to convex-hull vertices of the gradient
        rows. Values are unchanged; only the cost drops.

    Returns
    -------
    BoundTable
    """
    if derivs.mode != ORDER_ONE:
        raise ValueError("bounds_order_one needs an order-one derivative field")
    if derivs.values.shape != samples.covariates.shape:
        raise ValueError("gradient matrix must match the covariate shape")
    T = _check_targets(targets, samples.d)
    anchors = _check_anchors(anchor_subset, samples.n)
    grads = extreme_gradient_rows(derivs.values) if reduce_hull else derivs.values
    if T.shape[0] == 0:
        empty = np.zeros(0)
        return BoundTable(T, empty, empty, np.zeros(0, dtype=bool))
    lo, up = kernels.bounds_order_one(
        samples.covariates, samples.pilot, np.ascontiguousarray(grads), T, anchors
    )
    lo, up, cl = _clamp_arrays(np.asarray(lo), np.asarray(up))
    return BoundTable(T, lo, up, cl)


def bounds_order_one_local(
    samples: SampleSet,
    derivs: DerivativeField,
    targets: ArrayLike,
    n_anchors: int,
    metric: str = "gradient",
) -> BoundTable:
    """Order-one bounds with a separate nearest-anchor set per target.

    ``metric="gradient"`` uses :func:`select_anchors`; ``"euclidean"`` uses
    plain distances.
    """
    T = _check_targets(targets, samples.d)
    lo = np.empty(T.shape[0])
    up = np.empty(T.shape[0])
    cl = np.zeros(T.shape[0], dtype=bool)
    grads = extreme_gradient_rows(derivs.values)
    for ell in range(T.shape[0]):
        if metric == "gradient":
            idx = select_anchors(samples, derivs, T[ell], n_anchors)
        elif metric == "euclidean":
            idx = _nearest(np.linalg.norm(samples.covariates - T[ell], axis=1), n_anchors)
        else:
            raise ValueError(f"unknown anchor metric {metric!r}")
        a, b = kernels.bounds_order_one(
            samples.covariates, samples.pilot, grads, T[ell:ell + 1],
            np.ascontiguousarray(np.sort(idx))
        )
        lo[ell], up[ell], cl[ell] = clamp_bounds(a[0], b[0])
    return BoundTable(T, lo, up, cl)


def bounds_one_dim(
    samples: SampleSet,
    derivs: DerivativeField,
    targets: ArrayLike,
    q: Optional[int] = None,
    chunk: int = 256,
) -> BoundTable:
    """Order-``q`` extrapolation bounds for a single covariate.

    The Taylor polynomial up to order ``q-1`` uses the anchor's own
    derivatives; the order-``q`` term takes the extreme ``q``-th derivative
    observed across all samples.
    """
    if derivs.mode != ONE_DIM:
        raise ValueError("bounds_one_dim needs a one-dimensional derivative field")
    if samples.d != 1:
        raise ValueError("bounds_one_dim requires d = 1")
    q = derivs.order if q is None else int(q)
    if q < 1:
        raise ValueError("order q must be at least 1")
    if derivs.values.shape[1] < q:
        raise ValueError(f"derivative orders 1..{q} are required")
    if derivs.values.shape[0] != samples.n:
        raise ValueError("derivative rows must match the number of samples")
    T = _check_targets(targets, 1)
    x = samples.covariates[:, 0]
    D = derivs.values
    dq_min = np.min(D[:, q - 1])
    dq_max = np.max(D[:, q - 1])
    lo = np.empty(T.shape[0])
    up = np.empty(T.shape[0])
    for s in range(0, T.shape[0], chunk):
        h = T[s:s + chunk, 0][:, None] - x[None, :]
        base = np.broadcast_to(samples.pilot, h.shape).copy()
        hk = np.ones_like(h)
        for k in range(1, q):
            hk = hk * h
            base += D[:, k - 1] * hk / factorial(k)
        c = hk * h / factorial(q)
        lo_i = base + np.where(c >= 0, c * dq_min, c * dq_max)
        up_i = base + np.where(c >= 0, c * dq_max, c * dq_min)
        lo[s:s + chunk] = lo_i.max(axis=1)
        up[s:s + chunk] = up_i.min(axis=1)
    lo, up, cl = _clamp_arrays(lo, up)
    return BoundTable(T, lo, up, cl)


def _nearest(dist: NDArray[np.float64], k: int) -> NDArray[np.intp]:
    # stable sort keeps the smaller index first among equal distances
    return np.argsort(dist, kind="stable")[:k].astype(np.intp)


def select_anchors(
    samples: SampleSet,
    derivs: DerivativeField,
    target: ArrayLike,
    k: int,
) -> NDArray[np.intp]:
    """Indices of the ``k`` samples closest to ``target`` in gradient geometry.

    Distances are ``sqrt(u^T C u)`` for ``u = X_i - target`` where ``C`` is the
    covariance of the gradient rows, so directions in which the derivative
    varies count most. Indices are returned nearest first.
    """
    k = int(k)
    if k < 1:
        raise ValueError("k must be at least 1")
    n = samples.n
    if k >= n:
        return np.arange(n, dtype=np.intp)
    x = np.asarray(target, dtype=np.float64).ravel()
    if x.shape[0] != samples.d:
        raise ValueError("target dimension mismatch")
    G = derivs.values
    C = np.cov(G, rowvar=False, bias=True).reshape(samples.d, samples.d)
    evals, evecs = np.linalg.eigh(C)
    root = np.sqrt(np.clip(evals, 0.0, None))[:, None] * evecs.T
    U = samples.covariates - x
    dist = np.linalg.norm(U @ root.T, axis=1)
    if np.ptp(dist) <= 1e-12:
        dist = np.linalg.norm(U, axis=1)
    return _nearest(dist, k)
