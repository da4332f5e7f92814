"""Forest-weighted local polynomial fits for directional derivatives.

For each sample ``i`` a polynomial of degree ``q + 1`` in the projected
offset ``(X_l - X_i)^T v`` is fit to the pilot values with weights
``W[i, l]``. The coefficient of degree ``k`` times ``k!`` estimates the
``k``-th directional derivative at ``X_i``. The joint variant adds a penalty
pulling each point's derivative coefficients towards their weighted
neighbourhood average.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import factorial
from typing import Optional

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import linalg, sparse

from .bounds import SampleSet
from .forest import ForestParams, extract_weights, fit_poly_forest

RIDGE_RTOL = 1e-12
DENSE_LIMIT = 240
# Weight matrices sparser than this are multiplied in CSR form.
SPARSE_DENSITY = 0.2


class _FactoredWeights:
    """Products with ``W = A @ R.T`` through the sparse factors."""

    def __init__(self, A, R):
        self.A, self.R = sparse.csr_matrix(A), sparse.csr_matrix(R)
        self.At, self.Rt = self.A.T.tocsr(), self.R.T.tocsr()

    def __matmul__(self, z):
        return self.A @ (self.Rt @ z)

    @property
    def T(self):
        return _Transposed(self)


class _Transposed:
    def __init__(self, f):
        self.f = f

    def __matmul__(self, z):
        return self.f.R @ (self.f.At @ z)


class ConvergenceError(RuntimeError):
    """The iterative joint solve did not reach its tolerance."""


@dataclass(frozen=True)
class LocPolCoefficients:
    """Local polynomial coefficients, ``beta[i, j]`` for degree ``j = 0..q+1``."""

    beta: NDArray[np.float64]
    q: int
    direction: NDArray[np.float64]

    def derivative(self, k: int) -> NDArray[np.float64]:
        """``k!`` times the degree-``k`` coefficient at every sample."""
        if not 0 <= k <= self.q + 1:
            raise ValueError(f"derivative order must lie in 0..{self.q + 1}")
        return factorial(k) * self.beta[:, k]

    @property
    def fitted(self) -> NDArray[np.float64]:
        return self.beta[:, 0]


def _prepare(samples: SampleSet, weights: ArrayLike, v: ArrayLike, q: int):
    W = np.asarray(weights, dtype=np.float64)
    n = samples.n
    if W.shape != (n, n):
        raise ValueError(f"weight matrix must be {n}x{n}")
    if not np.all(np.isfinite(W)):
        raise ValueError("weight matrix contains non-finite entries")
    if np.any(W < 0):
        raise ValueError("weights must be non-negative")
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.shape[0] != samples.d or not np.all(np.isfinite(v)) or np.linalg.norm(v) == 0:
        raise ValueError("direction must be a finite non-zero vector of length d")
    if int(q) < 0:
        raise ValueError("q must be non-negative")
    return W, v, int(q)


def _offsets_scale(t: NDArray[np.float64], W: NDArray[np.float64]) -> NDArray[np.float64]:
    # largest |projected offset| among points with nonzero weight, per row
    off = np.abs(t[None, :] - t[:, None])
    s = np.max(np.where(W > 0, off, 0.0), axis=1)
    return np.where(s > 0, s, 1.0)


def _local_moments(t, y, W, scale, p, rows):
    """Gram blocks and right-hand sides for rows ``rows`` in scaled offsets."""
    u = (t[None, :] - t[rows, None]) / scale[rows, None]
    w = W[rows]
    k = p + 1
    pw = np.empty((2 * p + 1,) + u.shape)
    pw[0] = w
    for a in range(1, 2 * p + 1):
        pw[a] = pw[a - 1] * u
    S = pw.sum(axis=2)                               # (2p+1, r)
    Tm = np.einsum("arl,l->ra", pw[:k], y)           # (r, k)
    idx = np.add.outer(np.arange(k), np.arange(k))
    G = np.transpose(S[idx], (2, 0, 1))              # (r, k, k)
    return G, Tm


def _solve_blocks(G, b):
    k = G.shape[-1]
    diag = np.einsum("rii->ri", G)
    jitter = RIDGE_RTOL * diag.max(axis=1)
    A = G + jitter[:, None, None] * np.eye(k)
    try:
        return np.linalg.solve(A, b[..., None])[..., 0]
    except np.linalg.LinAlgError:
        return np.stack([np.linalg.lstsq(A[r], b[r], rcond=None)[0] for r in range(A.shape[0])])


def _all_blocks(t, y, W, scale, p, chunk=128):
    """Per-row Gram blocks; rows without weight get an identity block."""
    n = t.shape[0]
    blocks, rhs = [], []
    for s in range(0, n, chunk):
        rows = np.arange(s, min(n, s + chunk))
        G, b = _local_moments(t, y, W, scale, p, rows)
        blocks.append(G)
        rhs.append(b)
    G = np.concatenate(blocks)
    b = np.concatenate(rhs)
    empty = W.sum(axis=1) <= 0
    if np.any(empty):
        G[empty] = np.eye(p + 1)
        b[empty] = 0.0
    return G, b


def _per_point_scaled(t, y, W, scale, p):
    G, b = _all_blocks(t, y, W, scale, p)
    return _solve_blocks(G, b)


def _unscale(gamma, scale):
    p1 = gamma.shape[1]
    return gamma / scale[:, None] ** np.arange(p1)[None, :]


def weighted_locpol(samples: SampleSet, weights: ArrayLike, v: ArrayLike, q: int
                    ) -> LocPolCoefficients:
    """Independent weighted least-squares polynomial fit at every sample.

    Parameters
    ----------
    samples : SampleSet
    weights : ndarray of shape (n, n)
        Row ``i`` weights the pilot values used in the fit at sample ``i``.
    v : array_like of shape (d,)
        Projection direction.
    q : int
        Derivative order of interest; fits use degree ``q + 1``.
    """
    W, v, q = _prepare(samples, weights, v, q)
    if np.any(W.sum(axis=1) <= 0):
        raise ValueError("every weight row needs positive total weight")
    t = samples.covariates @ v
    scale = _offsets_scale(t, W)
    gamma = _per_point_scaled(t, samples.pilot, W, scale, q + 1)
    return LocPolCoefficients(_unscale(gamma, scale), q, v)


class LocalSystem:
    """Normal equations of all local fits for one weight matrix.

    Unknowns are ``gamma[i, j] = beta[i, j] * scale[i]**j``. The data term is
    block diagonal in ``i``; the penalty couples samples through
    ``A = diag(rowsum W) - W`` separately for each degree ``j >= 1``. The
    blocks do not depend on the penalty, so one instance serves a whole
    penalty grid.

    ``factors=(A, R)`` with ``W == A @ R.T`` (see ``forest.weight_factors``)
    lets the iterative solver multiply through sparse factors.
    """

    def __init__(self, t, y, W, q, factors=None):
        n = t.shape[0]
        p = q + 1
        self.n, self.q, self.k = n, q, p + 1
        self.scale = _offsets_scale(t, W)
        self.G, self.b = _all_blocks(t, y, W, self.scale, p)
        self.W = W
        self.rowsum = W.sum(axis=1)
        if factors is not None:
            op = _FactoredWeights(*factors)
            self._Wop, self._WTop = op, op.T
        elif np.count_nonzero(W) <= SPARSE_DENSITY * W.size:
            self._Wop, self._WTop = sparse.csr_matrix(W), sparse.csr_matrix(W.T)
        else:
            self._Wop, self._WTop = W, np.ascontiguousarray(W.T)
        # column j of inv_pow holds j! / scale**j
        coef = np.array([factorial(j) for j in range(self.k)], dtype=np.float64)
        self.inv_pow = coef[None, :] / self.scale[:, None] ** np.arange(self.k)[None, :]
        diag = np.einsum("rii->ri", self.G)
        self.jitter = RIDGE_RTOL * diag.max(axis=1)
        self.blocks = self.G + self.jitter[:, None, None] * np.eye(self.k)
        self._ata_diag = None
        self._unpenalized = None

    def _apply_A(self, z):
        return self.rowsum[:, None] * z - self._Wop @ z

    def _apply_At(self, z):
        return self.rowsum[:, None] * z - self._WTop @ z

    def matvec(self, g: NDArray[np.float64], lam: float) -> NDArray[np.float64]:
        out = np.einsum("rij,rj->ri", self.blocks, g)
        if lam > 0:
            z = g[:, 1:] * self.inv_pow[:, 1:]
            out[:, 1:] += lam * self._apply_At(self._apply_A(z)) * self.inv_pow[:, 1:]
        return out

    def dense(self, lam: float) -> NDArray[np.float64]:
        n, k = self.n, self.k
        H = np.zeros((n, k, n, k))
        ii = np.arange(n)
        H[ii, :, ii, :] = self.blocks
        if lam > 0:
            A = np.diag(self.rowsum) - self.W
            AtA = A.T @ A
            for j in range(1, k):
                c = self.inv_pow[:, j]
                H[:, j, :, j] += lam * (c[:, None] * AtA * c[None, :])
        return H.reshape(n * k, n * k)

    def preconditioner(self, lam: float) -> NDArray[np.float64]:
        B = self.blocks.copy()
        if lam > 0:
            if self._ata_diag is None:
                # squared column norms of A = diag(rowsum) - W
                self._ata_diag = (np.sum(self.W ** 2, axis=0) - 2 * self.rowsum * np.diag(self.W)
                                  + self.rowsum ** 2)
            for j in range(1, self.k):
                B[:, j, j] += lam * self._ata_diag * self.inv_pow[:, j] ** 2
        return np.linalg.inv(B)

    def unpenalized(self) -> NDArray[np.float64]:
        """Scaled per-point solution (zero penalty)."""
        if self._unpenalized is None:
            self._unpenalized = _solve_blocks(self.G, self.b)
        return self._unpenalized

    def solve(self, lam: float, solver: str = "auto", warm_start: bool = True,
              tol: float = 1e-8, max_iter: Optional[int] = None) -> NDArray[np.float64]:
        """Unscaled coefficient matrix ``beta`` for penalty ``lam``."""
        n, k = self.n, self.k
        if lam == 0.0 and solver == "auto":
            gamma = self.unpenalized()
        elif solver == "dense" or (solver == "auto" and n * k <= DENSE_LIMIT):
            H = self.dense(lam)
            try:
                gamma = linalg.solve(H, self.b.ravel(), assume_a="pos").reshape(n, k)
            except (linalg.LinAlgError, ValueError):
                gamma = linalg.lstsq(H, self.b.ravel())[0].reshape(n, k)
        else:
            x0 = self.unpenalized() if warm_start else np.zeros((n, k))
            cap = 10 * n * k if max_iter is None else int(max_iter)
            gamma, _ = _pcg(self, lam, x0, tol, cap)
        return _unscale(gamma, self.scale)


def _pcg(system: LocalSystem, lam, x0, tol, max_iter):
    b = system.b
    P = system.preconditioner(lam)

    def prec(r):
        return np.einsum("rij,rj->ri", P, r)

    x = x0.copy()
    r = b - system.matvec(x, lam)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b), 0
    z = prec(r)
    p = z.copy()
    rz = np.vdot(r, z)
    for it in range(1, max_iter + 1):
        if np.linalg.norm(r) <= tol * bnorm:
            return x, it - 1
        Ap = system.matvec(p, lam)
        pAp = np.vdot(p, Ap)
        if pAp <= 0:
            break
        step = rz / pAp
        x += step * p
        r -= step * Ap
        z = prec(r)
        rz_new = np.vdot(r, z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    if np.linalg.norm(r) <= tol * bnorm:
        return x, max_iter
    raise ConvergenceError(
        f"joint solve stopped at relative residual {np.linalg.norm(r) / bnorm:.3e} "
        f"after {max_iter} iterations")


def penalized_locpol(samples: SampleSet, weights: ArrayLike, v: ArrayLike, q: int,
                     lam: float, solver: str = "auto", warm_start: bool = True,
                     tol: float = 1e-8, max_iter: Optional[int] = None
                     ) -> LocPolCoefficients:
    """Joint local polynomial fit with a derivative smoothness penalty.

    Minimizes the summed weighted squared errors of all local fits plus
    ``lam * sum_i sum_{j>=1} (sum_l (j! beta[i,j] - j! beta[l,j]) W[i,l])**2``.

    Parameters
    ----------
    lam : float
        Penalty weight. ``0`` with ``solver="auto"`` returns the per-point fit.
    solver : {"auto", "cg", "dense"}
        ``"auto"`` uses a dense factorization for small systems and
        preconditioned conjugate gradients otherwise.
    warm_start : bool
        Start conjugate gradients at the unpenalized solution.
    tol : float
        Relative residual tolerance of the iterative solve.
    max_iter : int, optional
        Iteration cap, ``10 * n * (q + 2)`` by default.

    Raises
    ------
    ConvergenceError
        If conjugate gradients hit the iteration cap.
    """
    W, v, q = _prepare(samples, weights, v, q)
    lam = float(lam)
    if not (np.isfinite(lam) and lam >= 0):
        raise ValueError("penalty must be finite and non-negative")
    if solver not in ("auto", "cg", "dense"):
        raise ValueError(f"unknown solver {solver!r}")
    if np.any(W.sum(axis=1) <= 0):
        raise ValueError("every weight row needs positive total weight")
    beta = _joint_beta(samples.covariates @ v, samples.pilot, W, q, lam, solver,
                       warm_start, tol, max_iter)
    return LocPolCoefficients(beta, q, v)


def _joint_beta(t, y, W, q, lam, solver="auto", warm_start=True, tol=1e-8, max_iter=None):
    """Coefficient matrix of the penalized fit; rows without weight are zero."""
    return LocalSystem(t, y, W, q).solve(lam, solver, warm_start, tol, max_iter)


def penalty_value(beta: NDArray[np.float64], weights: ArrayLike) -> float:
    """Smoothness penalty of a coefficient matrix under weights ``W``."""
    W = np.asarray(weights, dtype=np.float64)
    A = np.diag(W.sum(axis=1)) - W
    total = 0.0
    for j in range(1, beta.shape[1]):
        total += float(np.sum((A @ (factorial(j) * beta[:, j])) ** 2))
    return total


def joint_objective(samples: SampleSet, weights: ArrayLike, v: ArrayLike,
                    beta: NDArray[np.float64], lam: float) -> float:
    """Penalized joint objective evaluated at ``beta`` (for checks)."""
    W = np.asarray(weights, dtype=np.float64)
    t = samples.covariates @ np.asarray(v, dtype=np.float64)
    off = t[None, :] - t[:, None]
    fit = np.zeros_like(off)
    for j in range(beta.shape[1]):
        fit += beta[:, j][:, None] * off ** j
    data = float(np.sum((samples.pilot[None, :] - fit) ** 2 * W))
    return data + lam * penalty_value(beta, W)


def rf_loc_pol(samples: SampleSet, k: int, v: ArrayLike, lam: float,
               params: ForestParams = ForestParams(), q: Optional[int] = None
               ) -> NDArray[np.float64]:
    """Directional derivative estimates of order ``k`` at every sample.

    Grows a polynomial-split forest in direction ``v``, extracts its weight
    matrix and runs the penalized local polynomial fit. ``q`` defaults to
    ``k``.
    """
    q = int(k) if q is None else int(q)
    if not 1 <= int(k) <= q:
        raise ValueError("derivative order k must satisfy 1 <= k <= q")
    forest = fit_poly_forest(samples, v, q, params)
    W = extract_weights(forest)
    coefs = penalized_locpol(samples, W, v, q, lam)
    return coefs.derivative(int(k))
