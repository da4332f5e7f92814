"""Random forests with polynomial split criteria and their locality weights.

Two flavours share one tree grower:

* ``fit_poly_forest`` scores a split by the residual sum of squares of
  polynomial fits in a projection ``v^T x`` on each child;
* ``fit_regression_forest`` uses mean fits, i.e. ordinary variance
  reduction.

A fitted forest induces weights ``W[i, l]``: the average over trees of
``1/|leaf|`` when sample ``i`` shares the leaf that point ``l`` falls in.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import sparse

from ._backend import kernels
from .bounds import SampleSet

FOREST_MAGIC = "EXTRABOUNDS-FOREST v1"


@dataclass(frozen=True)
class ForestParams:
    """Hyperparameters of a forest.

    Parameters
    ----------
    n_trees : int
    max_depth : int or None
        ``None`` grows until the leaf-size or impurity rule stops.
    min_samples_leaf : int
        Minimum in-bag rows (counted with multiplicity) in each child.
    impurity_tol : float
        A split is accepted only if the drop in residual sum of squares it
        achieves, divided by the number of in-bag rows of the tree, exceeds
        this value. ``inf`` forces single-leaf trees.
    mtry : int or None
        Coordinates tried per split; ``None`` means all.
    bootstrap : bool
    seed : int
    max_thresholds : int
        Cap on candidate thresholds per coordinate and node.
    """

    n_trees: int = 100
    max_depth: Optional[int] = None
    min_samples_leaf: int = 5
    impurity_tol: float = 0.0
    mtry: Optional[int] = None
    bootstrap: bool = True
    seed: int = 0
    max_thresholds: int = 256

    def __post_init__(self) -> None:
        if int(self.n_trees) < 1:
            raise ValueError("n_trees must be positive")
        if self.max_depth is not None and int(self.max_depth) < 1:
            raise ValueError("max_depth must be positive")
        if int(self.min_samples_leaf) < 1:
            raise ValueError("min_samples_leaf must be positive")
        if not float(self.impurity_tol) >= 0.0:
            raise ValueError("impurity_tol must be non-negative")
        if self.mtry is not None and int(self.mtry) < 1:
            raise ValueError("mtry must be positive")
        if int(self.max_thresholds) < 1:
            raise ValueError("max_thresholds must be positive")

    def with_(self, **changes) -> "ForestParams":
        return replace(self, **changes)


@dataclass(frozen=True)
class Tree:
    """Array-backed binary tree.

    ``feature[node] == -1`` marks a leaf; ``node_leaf[node]`` is then its
    slot in the CSR pair ``leaf_ptr`` / ``leaf_members`` holding the sorted
    unique in-bag sample indices of that leaf.
    """

    feature: NDArray[np.intp]
    threshold: NDArray[np.float64]
    left: NDArray[np.intp]
    right: NDArray[np.intp]
    node_leaf: NDArray[np.intp]
    leaf_ptr: NDArray[np.intp]
    leaf_members: NDArray[np.intp]

    @property
    def n_leaves(self) -> int:
        return self.leaf_ptr.shape[0] - 1

    @property
    def n_nodes(self) -> int:
        return self.feature.shape[0]

    def leaf(self, j: int) -> NDArray[np.intp]:
        return self.leaf_members[self.leaf_ptr[j]:self.leaf_ptr[j + 1]]

    def leaf_sizes(self) -> NDArray[np.intp]:
        return np.diff(self.leaf_ptr)

    def apply(self, X: NDArray[np.float64]) -> NDArray[np.intp]:
        """Leaf slot reached by each row of ``X``."""
        return np.asarray(kernels.apply_tree(
            np.ascontiguousarray(X, dtype=np.float64), self.feature, self.threshold,
            self.left, self.right, self.node_leaf))


@dataclass(frozen=True)
class Forest:
    """Fitted forest plus the training data its leaves index into."""

    trees: tuple
    params: ForestParams
    degree: int
    covariates: NDArray[np.float64]
    responses: NDArray[np.float64]
    direction: Optional[NDArray[np.float64]] = None

    @property
    def n_samples(self) -> int:
        return self.covariates.shape[0]

    @property
    def n_features(self) -> int:
        return self.covariates.shape[1]


def _unit_direction(v: ArrayLike, d: int) -> NDArray[np.float64]:
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.shape[0] != d:
        raise ValueError(f"direction must have length {d}")
    if not np.all(np.isfinite(v)) or np.linalg.norm(v) == 0.0:
        raise ValueError("direction must be a finite non-zero vector")
    return v


def _grow(X, t, y, degree, params: ForestParams, direction=None) -> Forest:
    n, d = X.shape
    if n < 1:
        raise ValueError("cannot fit a forest on an empty sample")
    mtry = d if params.mtry is None else min(int(params.mtry), d)
    max_depth = -1 if params.max_depth is None else int(params.max_depth)
    trees = []
    for k in range(params.n_trees):
        rng = np.random.default_rng([int(params.seed) & (2**63 - 1), k])
        rows = rng.integers(0, n, n) if params.bootstrap else np.arange(n)
        node_seed = int(rng.integers(0, 2**63 - 1))
        out = kernels.build_tree(
            X, t, y, rows.astype(np.intp), int(degree), int(params.min_samples_leaf),
            max_depth, float(params.impurity_tol), int(mtry), node_seed,
            int(params.max_thresholds), float(rows.shape[0]))
        trees.append(Tree(*[np.asarray(a) for a in out]))
    return Forest(tuple(trees), params, int(degree), X, y, direction)


def fit_poly_forest(samples: SampleSet, direction: ArrayLike, q: int,
                    params: ForestParams = ForestParams()) -> Forest:
    """Grow a forest whose splits favour children that are polynomial in ``v^T x``.

    Each candidate split is scored by the summed residual sums of squares of
    degree ``q + 1`` least-squares fits of the pilot values on powers of the
    projection, in each child.
    """
    if int(q) < 0:
        raise ValueError("q must be non-negative")
    v = _unit_direction(direction, samples.d)
    t = np.ascontiguousarray(samples.covariates @ v)
    return _grow(samples.covariates, t, samples.pilot, int(q) + 1, params, v)


def fit_regression_forest(covariates: ArrayLike, responses: ArrayLike,
                          params: ForestParams = ForestParams()) -> Forest:
    """Ordinary regression forest (mean fit per child)."""
    X = np.ascontiguousarray(np.asarray(covariates, dtype=np.float64))
    if X.ndim == 1:
        X = X[:, None]
    y = np.ascontiguousarray(np.asarray(responses, dtype=np.float64).ravel())
    if X.shape[0] == 0:
        raise ValueError("cannot fit a forest on an empty sample")
    if y.shape[0] != X.shape[0]:
        raise ValueError("responses and covariates differ in length")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("non-finite training data")
    return _grow(X, np.zeros(X.shape[0]), y, 0, params)


def _poly_rss(t: NDArray[np.float64], y: NDArray[np.float64], degree: int) -> float:
    deg = min(degree, np.unique(t).shape[0] - 1)
    if deg <= 0:
        return float(np.sum((y - y.mean()) ** 2))
    c = t.mean()
    s = np.max(np.abs(t - c))
    V = np.vander((t - c) / s, deg + 1, increasing=True)
    coef, *_ = np.linalg.lstsq(V, y, rcond=None)
    return float(np.sum((y - V @ coef) ** 2))


def split_impurity(left_X: ArrayLike, left_y: ArrayLike, right_X: ArrayLike,
                   right_y: ArrayLike, direction: ArrayLike, q: int) -> float:
    """Summed residual sums of squares of degree ``q + 1`` fits on two children.

    A child with ``r`` distinct projected values is fit with degree at most
    ``r - 1``, so tiny or constant children drop towards a mean fit.
    """
    out = 0.0
    for X, y in ((left_X, left_y), (right_X, right_y)):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        y = np.asarray(y, dtype=np.float64).ravel()
        if y.shape[0] == 0:
            raise ValueError("children must be non-empty")
        v = _unit_direction(direction, X.shape[1])
        out += _poly_rss(X @ v, y, int(q) + 1)
    return out


def leaf_membership(forest: Forest) -> sparse.csr_matrix:
    """Sparse (n, total leaves) matrix with entry ``1/(M |leaf|)``."""
    rows, cols, vals = [], [], []
    offset = 0
    M = len(forest.trees)
    for tree in forest.trees:
        sizes = tree.leaf_sizes()
        leaf_of_member = np.repeat(np.arange(tree.n_leaves), sizes)
        rows.append(tree.leaf_members)
        cols.append(leaf_of_member + offset)
        vals.append(1.0 / (M * sizes[leaf_of_member]))
        offset += tree.n_leaves
    return sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(forest.n_samples, offset))


def _routing(forest: Forest, points: NDArray[np.float64]) -> sparse.csr_matrix:
    m = points.shape[0]
    cols, offset = [], 0
    for tree in forest.trees:
        cols.append(tree.apply(points) + offset)
        offset += tree.n_leaves
    M = len(forest.trees)
    c = np.concatenate(cols)
    r = np.tile(np.arange(m), M)
    return sparse.csr_matrix((np.ones(c.shape[0]), (r, c)), shape=(m, offset))


def _check_points(forest: Forest, points: Optional[ArrayLike]) -> NDArray[np.float64]:
    if points is None:
        return forest.covariates
    P = np.asarray(points, dtype=np.float64)
    if P.ndim == 1:
        P = P.reshape(1, -1) if forest.n_features > 1 or P.size == 1 else P[:, None]
    if P.shape[1] != forest.n_features:
        raise ValueError(f"points must have {forest.n_features} columns")
    return np.ascontiguousarray(P)


def extract_weights(forest: Forest, points: Optional[ArrayLike] = None) -> NDArray[np.float64]:
    """Forest weight matrix ``W[i, l] = w_i(points[l])``.

    With ``points=None`` the training covariates are used, giving the square
    matrix that feeds the local polynomial fits. Every column sums to one.
    """
    P = _check_points(forest, points)
    A = leaf_membership(forest)
    R = _routing(forest, P)
    # the product is dense in practice; a dense right factor is much faster
    return np.asarray(A @ R.T.toarray())


def weight_factors(forest: Forest, points: Optional[ArrayLike] = None
                   ) -> tuple[sparse.csr_matrix, sparse.csr_matrix]:
    """Sparse factors ``A, R`` with ``extract_weights(forest, points) == A @ R.T``.

    ``A[i, c]`` is the in-bag share of sample ``i`` in leaf ``c`` (leaves of all
    trees stacked) and ``R[l, c]`` flags that ``points[l]`` falls in leaf ``c``.
    Products with the factors cost ``O(n M)`` instead of ``O(n m)``.
    """
    P = _check_points(forest, points)
    return leaf_membership(forest), _routing(forest, P)


def predict(forest: Forest, points: Optional[ArrayLike] = None) -> NDArray[np.float64]:
    """Weighted-average prediction at ``points``."""
    W = extract_weights(forest, points)
    return W.T @ forest.responses


def weighted_quantile(values: NDArray[np.float64], weights: NDArray[np.float64],
                      alpha: float | NDArray[np.float64]) -> NDArray[np.float64]:
    """Smallest value whose cumulative weight reaches ``alpha``.

    ``weights`` may be (n,) or (n, m); the result then has shape ``(m,)``
    (or ``(len(alpha), m)`` for an array of levels).
    """
    order = np.argsort(values, kind="stable")
    v = values[order]
    w = weights[order]
    cw = np.cumsum(w, axis=0)
    alphas = np.atleast_1d(np.asarray(alpha, dtype=np.float64))
    if np.any((alphas <= 0.0) | (alphas >= 1.0)):
        raise ValueError("alpha must lie in (0, 1)")
    out = []
    for a in alphas:
        reached = cw >= a - 1e-12
        idx = np.argmax(reached, axis=0)
        out.append(v[idx])
    res = np.stack(out)
    return res[0] if np.ndim(alpha) == 0 else res


def predict_quantile(forest: Forest, responses: Optional[ArrayLike], points: ArrayLike,
                     alpha: float) -> NDArray[np.float64] | float:
    """Quantile of the forest-weighted response distribution at ``points``.

    ``responses=None`` uses the forest's own training responses. A single
    point (1-d input for d > 1) returns a float.
    """
    y = forest.responses if responses is None else np.asarray(responses, dtype=np.float64).ravel()
    if y.shape[0] != forest.n_samples:
        raise ValueError("responses must match the training sample size")
    single = np.ndim(points) == 1 and forest.n_features > 1 or np.ndim(points) == 0
    W = extract_weights(forest, points)
    q = weighted_quantile(y, W, alpha)
    return float(q[0]) if single else q


def _tree_to_dict(tree: Tree) -> dict:
    return {k: getattr(tree, k).tolist() for k in
            ("feature", "threshold", "left", "right", "node_leaf", "leaf_ptr", "leaf_members")}


def save_forest(forest: Forest, path: str | Path) -> None:
    """Write a forest to a versioned text file (magic line + JSON body)."""
    body = {
        "params": asdict(forest.params),
        "degree": forest.degree,
        "direction": None if forest.direction is None else forest.direction.tolist(),
        "covariates": forest.covariates.tolist(),
        "responses": forest.responses.tolist(),
        "trees": [_tree_to_dict(t) for t in forest.trees],
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(FOREST_MAGIC + "\n")
        json.dump(body, fh)


def load_forest(path: str | Path) -> Forest:
    """Read a forest written by :func:`save_forest`."""
    with open(path, "r", encoding="utf-8") as fh:
        magic = fh.readline().rstrip("\n")
        if magic != FOREST_MAGIC:
            raise ValueError(f"{path}: not a forest file (bad header {magic!r})")
        body = json.load(fh)
    trees = []
    for td in body["trees"]:
        trees.append(Tree(
            np.asarray(td["feature"], dtype=np.intp),
            np.asarray(td["threshold"], dtype=np.float64),
            np.asarray(td["left"], dtype=np.intp),
            np.asarray(td["right"], dtype=np.intp),
            np.asarray(td["node_leaf"], dtype=np.intp),
            np.asarray(td["leaf_ptr"], dtype=np.intp),
            np.asarray(td["leaf_members"], dtype=np.intp)))
    X = np.ascontiguousarray(np.asarray(body["covariates"], dtype=np.float64).reshape(
        len(body["responses"]), -1))
    direction = body.get("direction")
    return Forest(tuple(trees), ForestParams(**body["params"]), int(body["degree"]), X,
                  np.asarray(body["responses"], dtype=np.float64),
                  None if direction is None else np.asarray(direction, dtype=np.float64))


def oob_predictions(forest: Forest) -> NDArray[np.float64]:
    """Out-of-bag predictions at the training points (NaN if never out of bag).

    Requires the in-bag multisets, which are regenerated from the seed.
    """
    n = forest.n_samples
    num = np.zeros(n)
    cnt = np.zeros(n)
    for k, tree in enumerate(forest.trees):
        rng = np.random.default_rng([int(forest.params.seed) & (2**63 - 1), k])
        rows = rng.integers(0, n, n) if forest.params.bootstrap else np.arange(n)
        oob = np.ones(n, dtype=bool)
        oob[rows] = False
        if not np.any(oob):
            continue
        leaves = tree.apply(forest.covariates[oob])
        sizes = tree.leaf_sizes()
        sums = np.add.reduceat(forest.responses[tree.leaf_members], tree.leaf_ptr[:-1]) \
            if tree.leaf_members.shape[0] else np.zeros(tree.n_leaves)
        # empty leaves cannot occur: every leaf holds at least one in-bag row
        num[oob] += sums[leaves] / sizes[leaves]
        cnt[oob] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        return num / cnt


__all__: Sequence[str] = (
    "ForestParams", "Tree", "Forest", "fit_poly_forest", "fit_regression_forest",
    "split_impurity", "extract_weights", "predict", "predict_quantile",
    "weighted_quantile", "save_forest", "load_forest", "leaf_membership",
    "oob_predictions",
)
