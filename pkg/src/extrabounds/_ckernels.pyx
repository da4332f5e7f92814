# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: tree growth with moment-based split scans, tree
routing, and the anchor/derivative double loop of the first-order bounds.

Semantics match ``_pykernels`` exactly; see that module for the reference
formulation.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs, INFINITY
from libc.stdlib cimport malloc, free, qsort
from libc.stdint cimport uint64_t

cnp.import_array()

cdef enum:
    MAXK = 8
cdef double PIVOT_RTOL = 1e-10


cdef inline uint64_t splitmix_next(uint64_t* state) noexcept nogil:
    state[0] = state[0] + <uint64_t>0x9E3779B97F4A7C15ULL
    cdef uint64_t z = state[0]
    z = (z ^ (z >> 30)) * <uint64_t>0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * <uint64_t>0x94D049BB133111EBULL
    return z ^ (z >> 31)


cdef double rss_moments(const double* S, const double* T, double Y2, int degree) noexcept nogil:
    cdef double L[MAXK][MAXK]
    cdef double z[MAXK]
    cdef int k = degree + 1
    cdef int c, j, r
    cdef double piv, lcc, zc, val
    cdef double rss = Y2
    for c in range(k):
        piv = S[2 * c]
        for j in range(c):
            piv -= L[c][j] * L[c][j]
        if not (piv > PIVOT_RTOL * S[2 * c] and piv > 0.0):
            break
        lcc = sqrt(piv)
        L[c][c] = lcc
        zc = T[c]
        for j in range(c):
            zc -= L[c][j] * z[j]
        zc = zc / lcc
        z[c] = zc
        rss -= zc * zc
        for r in range(c + 1, k):
            val = S[r + c]
            for j in range(c):
                val -= L[r][j] * L[c][j]
            L[r][c] = val / lcc
    if rss < 0.0:
        rss = 0.0
    return rss


def rss_from_moments_scalar(double[::1] S, double[::1] T, double Y2, int degree):
    return rss_moments(&S[0], &T[0], Y2, degree)


cdef struct KeyRow:
    double key
    Py_ssize_t row


cdef int cmp_keyrow(const void* a, const void* b) noexcept nogil:
    cdef KeyRow* x = <KeyRow*>a
    cdef KeyRow* y = <KeyRow*>b
    if x.key < y.key:
        return -1
    if x.key > y.key:
        return 1
    if x.row < y.row:
        return -1
    if x.row > y.row:
        return 1
    return 0


def build_tree(const double[:, ::1] X, const double[::1] t, const double[::1] y,
               rows_in, int degree, int min_leaf, int max_depth, double tol,
               int mtry, uint64_t seed, int max_thresholds, double rss_scale):
    """Grow one tree on the in-bag multiset ``rows_in``.

    Returns ``(feature, threshold, left, right, node_leaf, leaf_ptr,
    leaf_members)``; ``feature == -1`` marks leaves, ``node_leaf`` maps a
    leaf node to its slot in the CSR-style ``leaf_ptr``/``leaf_members``.
    A split is kept when its RSS decrease divided by ``rss_scale`` exceeds
    ``tol``.
    """
    if degree + 1 > MAXK:
        raise ValueError("polynomial degree too large for the compiled kernel")
    cdef Py_ssize_t[::1] rows = np.array(rows_in, dtype=np.intp, copy=True)
    cdef Py_ssize_t N = rows.shape[0]
    cdef Py_ssize_t d = X.shape[1]
    cdef uint64_t state = seed
    cdef int nmom = 2 * degree + 1

    cdef double[::1] u = np.empty(N)
    cdef double[::1] yc = np.empty(N)
    cdef double[:, ::1] pw = np.empty((N, nmom))
    cdef double[:, ::1] ty = np.empty((N, degree + 1))
    cdef double[::1] y2 = np.empty(N)
    cdef double[::1] split_imp = np.empty(N + 1)
    cdef double[::1] left_rss = np.empty(N + 1)
    cdef Py_ssize_t[::1] cand = np.empty(N + 1, dtype=np.intp)
    cdef Py_ssize_t[::1] perm = np.empty(d, dtype=np.intp)
    cdef Py_ssize_t[::1] scratch = np.empty(N, dtype=np.intp)
    cdef KeyRow* keys = <KeyRow*>malloc(max(N, 1) * sizeof(KeyRow))
    cdef Py_ssize_t* order = <Py_ssize_t*>malloc(max(N, 1) * sizeof(Py_ssize_t))
    cdef double Sacc[MAXK * 2]
    cdef double Tacc[MAXK]
    cdef double Yacc

    feature, threshold, left, right, node_leaf = [-1], [0.0], [-1], [-1], [-1]
    leaf_ptr = [0]
    leaf_members = []
    stack = [(0, 0, N, 0)]

    cdef Py_ssize_t node, start, end, depth, nrows, i, a, j, b, ncand, L, kk, f, fi, nfeat
    cdef Py_ssize_t best_f, best_b
    cdef double c, s, ybar, parent, best_imp, imp, thr, best_thr, tmp
    cdef int deg
    cdef bint has_best
    best_f = 0
    best_b = 0
    best_thr = 0.0
    try:
        while stack:
            node, start, end, depth = stack.pop()
            nrows = end - start
            has_best = False
            if not ((max_depth >= 0 and depth >= max_depth) or nrows < 2 * min_leaf):
                # node-local scaling of the projection and centring of y
                c = 0.0
                ybar = 0.0
                for i in range(nrows):
                    c += t[rows[start + i]]
                    ybar += y[rows[start + i]]
                c = c / nrows
                ybar = ybar / nrows
                s = 0.0
                if degree > 0:
                    for i in range(nrows):
                        tmp = fabs(t[rows[start + i]] - c)
                        if tmp > s:
                            s = tmp
                deg = degree if s > 0.0 else 0
                for i in range(nrows):
                    u[i] = (t[rows[start + i]] - c) / s if s > 0.0 else 0.0
                    yc[i] = y[rows[start + i]] - ybar
                    pw[i, 0] = 1.0
                    for a in range(1, 2 * deg + 1):
                        pw[i, a] = pw[i, a - 1] * u[i]
                    for a in range(deg + 1):
                        ty[i, a] = pw[i, a] * yc[i]
                    y2[i] = yc[i] * yc[i]
                for a in range(2 * deg + 1):
                    Sacc[a] = 0.0
                for a in range(deg + 1):
                    Tacc[a] = 0.0
                Yacc = 0.0
                for i in range(nrows):
                    for a in range(2 * deg + 1):
                        Sacc[a] += pw[i, a]
                    for a in range(deg + 1):
                        Tacc[a] += ty[i, a]
                    Yacc += y2[i]
                parent = rss_moments(Sacc, Tacc, Yacc, deg)

                for a in range(d):
                    perm[a] = a
                if mtry >= d:
                    nfeat = d
                else:
                    nfeat = mtry
                    for a in range(mtry):
                        j = a + <Py_ssize_t>(splitmix_next(&state) % <uint64_t>(d - a))
                        kk = perm[a]
                        perm[a] = perm[j]
                        perm[j] = kk
                best_imp = INFINITY
                for fi in range(nfeat):
                    f = perm[fi]
                    for i in range(nrows):
                        keys[i].key = X[rows[start + i], f]
                        keys[i].row = rows[start + i]
                    # sort local positions by (value, row)
                    _sort_positions(keys, order, nrows)
                    # candidate boundaries
                    L = 0
                    for b in range(1, nrows):
                        if keys[order[b - 1]].key < keys[order[b]].key and b >= min_leaf and nrows - b >= min_leaf:
                            cand[L] = b
                            L += 1
                    if L == 0:
                        continue
                    if L > max_thresholds:
                        if max_thresholds == 1:
                            ncand = 1
                        else:
                            for kk in range(max_thresholds):
                                cand[kk] = cand[(kk * (L - 1)) // (max_thresholds - 1)]
                            ncand = max_thresholds
                    else:
                        ncand = L
                    # forward pass
                    for a in range(2 * deg + 1):
                        Sacc[a] = 0.0
                    for a in range(deg + 1):
                        Tacc[a] = 0.0
                    Yacc = 0.0
                    kk = 0
                    for i in range(nrows):
                        j = order[i]
                        for a in range(2 * deg + 1):
                            Sacc[a] += pw[j, a]
                        for a in range(deg + 1):
                            Tacc[a] += ty[j, a]
                        Yacc += y2[j]
                        if kk < ncand and cand[kk] == i + 1:
                            left_rss[kk] = rss_moments(Sacc, Tacc, Yacc, deg)
                            kk += 1
                    # backward pass
                    for a in range(2 * deg + 1):
                        Sacc[a] = 0.0
                    for a in range(deg + 1):
                        Tacc[a] = 0.0
                    Yacc = 0.0
                    kk = ncand - 1
                    i = nrows - 1
                    while i >= 0:
                        j = order[i]
                        for a in range(2 * deg + 1):
                            Sacc[a] += pw[j, a]
                        for a in range(deg + 1):
                            Tacc[a] += ty[j, a]
                        Yacc += y2[j]
                        if kk >= 0 and cand[kk] == i:
                            split_imp[kk] = left_rss[kk] + rss_moments(Sacc, Tacc, Yacc, deg)
                            kk -= 1
                        i -= 1
                    for kk in range(ncand):
                        imp = split_imp[kk]
                        if imp < best_imp:
                            best_imp = imp
                            b = cand[kk]
                            thr = 0.5 * (keys[order[b - 1]].key + keys[order[b]].key)
                            if thr >= keys[order[b]].key:
                                thr = keys[order[b - 1]].key
                            best_f = f
                            best_b = b
                            best_thr = thr
                            has_best = True
                if has_best and not ((parent - best_imp) / rss_scale > tol):
                    has_best = False
            if not has_best:
                node_leaf[node] = len(leaf_ptr) - 1
                members = np.unique(np.asarray(rows[start:end]))
                leaf_members.append(members)
                leaf_ptr.append(leaf_ptr[len(leaf_ptr) - 1] + members.shape[0])
                continue
            # reorder the segment by the chosen feature
            for i in range(nrows):
                keys[i].key = X[rows[start + i], best_f]
                keys[i].row = rows[start + i]
            _sort_positions(keys, order, nrows)
            for i in range(nrows):
                scratch[i] = keys[order[i]].row
            for i in range(nrows):
                rows[start + i] = scratch[i]
            feature[node] = best_f
            threshold[node] = best_thr
            lnode = len(feature)
            rnode = lnode + 1
            for _ in range(2):
                feature.append(-1)
                threshold.append(0.0)
                left.append(-1)
                right.append(-1)
                node_leaf.append(-1)
            left[node] = lnode
            right[node] = rnode
            stack.append((rnode, start + best_b, end, depth + 1))
            stack.append((lnode, start, start + best_b, depth + 1))
    finally:
        free(keys)
        free(order)

    members_all = np.concatenate(leaf_members) if leaf_members else np.zeros(0, np.intp)
    return (np.asarray(feature, dtype=np.intp), np.asarray(threshold, dtype=np.float64),
            np.asarray(left, dtype=np.intp), np.asarray(right, dtype=np.intp),
            np.asarray(node_leaf, dtype=np.intp), np.asarray(leaf_ptr, dtype=np.intp),
            members_all.astype(np.intp))


cdef KeyRow* _sort_base


cdef int cmp_pos(const void* a, const void* b) noexcept nogil:
    cdef Py_ssize_t ia = (<Py_ssize_t*>a)[0]
    cdef Py_ssize_t ib = (<Py_ssize_t*>b)[0]
    return cmp_keyrow(&_sort_base[ia], &_sort_base[ib])


cdef void _sort_positions(KeyRow* keys, Py_ssize_t* order, Py_ssize_t n) noexcept:
    global _sort_base
    cdef Py_ssize_t i
    for i in range(n):
        order[i] = i
    _sort_base = keys
    qsort(order, n, sizeof(Py_ssize_t), cmp_pos)


def apply_tree(const double[:, ::1] X, const Py_ssize_t[::1] feature,
               const double[::1] threshold, const Py_ssize_t[::1] left,
               const Py_ssize_t[::1] right, const Py_ssize_t[::1] node_leaf):
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t[::1] out = np.empty(n, dtype=np.intp)
    cdef Py_ssize_t i, nd
    with nogil:
        for i in range(n):
            nd = 0
            while feature[nd] >= 0:
                if X[i, feature[nd]] <= threshold[nd]:
                    nd = left[nd]
                else:
                    nd = right[nd]
            out[i] = node_leaf[nd]
    return np.asarray(out)


def bounds_order_one(const double[:, ::1] X, const double[::1] pilot,
                     const double[:, ::1] grads, const double[:, ::1] targets,
                     const Py_ssize_t[::1] anchors):
    cdef Py_ssize_t m = targets.shape[0]
    cdef Py_ssize_t na = anchors.shape[0]
    cdef Py_ssize_t K = grads.shape[0]
    cdef Py_ssize_t d = X.shape[1]
    cdef double[::1] lo = np.empty(m)
    cdef double[::1] up = np.empty(m)
    cdef double* diff = <double*>malloc(max(d, 1) * sizeof(double))
    cdef Py_ssize_t ell, ia, i, k, j
    cdef double smin, smax, v, blo, bup, best_lo, best_up
    try:
        with nogil:
            for ell in range(m):
                best_lo = -INFINITY
                best_up = INFINITY
                for ia in range(na):
                    i = anchors[ia]
                    for j in range(d):
                        diff[j] = targets[ell, j] - X[i, j]
                    smin = INFINITY
                    smax = -INFINITY
                    for k in range(K):
                        v = 0.0
                        for j in range(d):
                            v += grads[k, j] * diff[j]
                        if v < smin:
                            smin = v
                        if v > smax:
                            smax = v
                    blo = pilot[i] + smin
                    bup = pilot[i] + smax
                    if blo > best_lo:
                        best_lo = blo
                    if bup < best_up:
                        best_up = bup
                lo[ell] = best_lo
                up[ell] = best_up
    finally:
        free(diff)
    return np.asarray(lo), np.asarray(up)
