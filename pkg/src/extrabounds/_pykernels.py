"""Pure numpy implementations of the hot loops.

These mirror ``_ckernels.pyx`` step for step (same traversal order, same
accumulation order, same pseudo-random stream) so that both backends grow
the same trees. They are used when the compiled extension is unavailable or
when ``EXTRABOUNDS_BACKEND=python`` is set.
"""

import numpy as np

MASK64 = (1 << 64) - 1
PIVOT_RTOL = 1e-10


class SplitMix64:
    """Tiny deterministic generator shared with the compiled backend."""

    def __init__(self, seed):
        self.state = int(seed) & MASK64

    def next(self):
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)


def rss_from_moments(S, T, Y2, degree):
    """Residual sum of squares of a polynomial least-squares fit.

    ``S[..., a]`` holds sums of ``u**a`` (a = 0..2*degree), ``T[..., a]`` sums
    of ``u**a * y`` and ``Y2`` the sum of ``y**2``. Works on a leading batch
    axis. Columns whose Cholesky pivot collapses (relative to their norm) end
    the fit at the previous degree.
    """
    S = np.asarray(S, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    rss = np.array(Y2, dtype=np.float64, copy=True)
    batch = rss.shape
    k = degree + 1
    L = np.zeros(batch + (k, k))
    z = np.zeros(batch + (k,))
    active = np.ones(batch, dtype=bool)
    for c in range(k):
        piv = S[..., 2 * c].copy()
        for j in range(c):
            piv -= L[..., c, j] ** 2
        ok = active & (piv > PIVOT_RTOL * S[..., 2 * c]) & (piv > 0.0)
        active = ok
        lcc = np.sqrt(np.where(ok, piv, 1.0))
        L[..., c, c] = lcc
        zc = T[..., c].copy()
        for j in range(c):
            zc -= L[..., c, j] * z[..., j]
        zc = np.where(ok, zc / lcc, 0.0)
        z[..., c] = zc
        rss -= zc * zc
        # Row entries of L for the columns that follow.
        for r in range(c + 1, k):
            val = S[..., r + c].copy()
            for j in range(c):
                val -= L[..., r, j] * L[..., c, j]
            L[..., r, c] = np.where(ok, val / lcc, 0.0)
    return np.maximum(rss, 0.0)


def _moment_terms(u, yc, degree):
    """Per-row contributions: powers u^0..u^(2p), u^a*y for a<=p, y^2."""
    n = u.shape[0]
    pw = np.empty((n, 2 * degree + 1))
    pw[:, 0] = 1.0
    for a in range(1, 2 * degree + 1):
        pw[:, a] = pw[:, a - 1] * u
    ty = pw[:, : degree + 1] * yc[:, None]
    return pw, ty, yc * yc


def _seq_sum(a):
    # Sequential left-to-right sum, matching the compiled loop.
    return np.cumsum(a)[-1] if a.shape[0] else 0.0


def _node_scaling(t_rows, y_rows, degree):
    n = t_rows.shape[0]
    c = _seq_sum(t_rows) / n
    s = np.max(np.abs(t_rows - c)) if degree > 0 else 0.0
    deg = degree if s > 0.0 else 0
    u = (t_rows - c) / s if s > 0.0 else np.zeros(n)
    ybar = _seq_sum(y_rows) / n
    return u, y_rows - ybar, deg


def _select_candidates(vals, nrows, min_leaf, max_thresholds):
    b = np.nonzero(vals[:-1] < vals[1:])[0] + 1
    b = b[(b >= min_leaf) & (nrows - b >= min_leaf)]
    L = b.shape[0]
    if L > max_thresholds:
        if max_thresholds == 1:
            b = b[:1]
        else:
            k = np.arange(max_thresholds, dtype=np.int64)
            b = b[(k * (L - 1)) // (max_thresholds - 1)]
    return b


def build_tree(X, t, y, rows, degree, min_leaf, max_depth, tol, mtry, seed,
               max_thresholds, rss_scale):
    """Grow one tree greedily; see ``_ckernels.build_tree`` for the contract."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    t = np.ascontiguousarray(t, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    rows = np.array(rows, dtype=np.intp, copy=True)
    d = X.shape[1]
    rng = SplitMix64(seed)

    feature, threshold, left, right, node_leaf = [], [], [], [], []
    leaf_ptr = [0]
    leaf_members = []

    def new_node():
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        node_leaf.append(-1)
        return len(feature) - 1

    root = new_node()
    stack = [(root, 0, rows.shape[0], 0)]
    while stack:
        node, start, end, depth = stack.pop()
        seg = rows[start:end]
        nrows = end - start
        best = None
        if not ((max_depth >= 0 and depth >= max_depth) or nrows < 2 * min_leaf):
            u, yc, deg = _node_scaling(t[seg], y[seg], degree)
            pw, ty, y2 = _moment_terms(u, yc, deg)
            parent = float(rss_from_moments(
                _seq_colsum(pw), _seq_colsum(ty), _seq_sum(y2), deg))
            if mtry >= d:
                feats = list(range(d))
            else:
                perm = list(range(d))
                for a in range(mtry):
                    j = a + rng.next() % (d - a)
                    perm[a], perm[j] = perm[j], perm[a]
                feats = perm[:mtry]
            best_imp = np.inf
            for f in feats:
                vals = X[seg, f]
                order = np.lexsort((seg, vals))
                sv = vals[order]
                cand = _select_candidates(sv, nrows, min_leaf, max_thresholds)
                if cand.shape[0] == 0:
                    continue
                fp, ft, fy = np.cumsum(pw[order], axis=0), np.cumsum(ty[order], axis=0), np.cumsum(y2[order])
                rp, rt, ry = (np.cumsum(pw[order][::-1], axis=0)[::-1],
                              np.cumsum(ty[order][::-1], axis=0)[::-1],
                              np.cumsum(y2[order][::-1])[::-1])
                rl = rss_from_moments(fp[cand - 1], ft[cand - 1], fy[cand - 1], deg)
                rr = rss_from_moments(rp[cand], rt[cand], ry[cand], deg)
                imp = rl + rr
                a = int(np.argmin(imp))
                if imp[a] < best_imp:
                    best_imp = float(imp[a])
                    b = int(cand[a])
                    thr = 0.5 * (sv[b - 1] + sv[b])
                    if thr >= sv[b]:
                        thr = sv[b - 1]
                    best = (f, b, thr, order)
            if best is not None and not ((parent - best_imp) / rss_scale > tol):
                best = None
        if best is None:
            node_leaf[node] = len(leaf_ptr) - 1
            members = np.unique(seg)
            leaf_members.append(members)
            leaf_ptr.append(leaf_ptr[-1] + members.shape[0])
            continue
        f, b, thr, order = best
        rows[start:end] = seg[order]
        feature[node] = f
        threshold[node] = thr
        lnode = new_node()
        rnode = new_node()
        left[node] = lnode
        right[node] = rnode
        stack.append((rnode, start + b, end, depth + 1))
        stack.append((lnode, start, start + b, depth + 1))

    members = np.concatenate(leaf_members) if leaf_members else np.zeros(0, np.intp)
    return (np.asarray(feature, dtype=np.intp), np.asarray(threshold, dtype=np.float64),
            np.asarray(left, dtype=np.intp), np.asarray(right, dtype=np.intp),
            np.asarray(node_leaf, dtype=np.intp), np.asarray(leaf_ptr, dtype=np.intp),
            members.astype(np.intp))


def _seq_colsum(a):
    return np.cumsum(a, axis=0)[-1] if a.shape[0] else np.zeros(a.shape[1])


def apply_tree(X, feature, threshold, left, right, node_leaf):
    """Leaf id reached by every row of ``X``."""
    X = np.asarray(X, dtype=np.float64)
    node = np.zeros(X.shape[0], dtype=np.intp)
    active = feature[node] >= 0
    while np.any(active):
        idx = np.nonzero(active)[0]
        nd = node[idx]
        go_left = X[idx, feature[nd]] <= threshold[nd]
        node[idx] = np.where(go_left, left[nd], right[nd])
        active[idx] = feature[node[idx]] >= 0
    return node_leaf[node]


def bounds_order_one(X, pilot, grads, targets, anchors):
    """Raw max-of-lowers / min-of-uppers for first-order bounds."""
    X = np.asarray(X, dtype=np.float64)
    m = targets.shape[0]
    lo = np.empty(m)
    up = np.empty(m)
    Xa = X[anchors]
    pa = pilot[anchors]
    for ell in range(m):
        diff = targets[ell][None, :] - Xa            # (a, d)
        s = diff @ grads.T                           # (a, K)
        lo[ell] = np.max(pa + s.min(axis=1))
        up[ell] = np.min(pa + s.max(axis=1))
    return lo, up
