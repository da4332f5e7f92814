import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from extrabounds.bounds import (BoundTable, DerivativeField, SampleSet, bounds_one_dim,
                                bounds_order_one, bounds_order_one_local, clamp_bounds,
                                extreme_gradient_rows, select_anchors)

from conftest import brute_force_order_one


def _random_instance(rng, n, d, m=7):
    X = rng.uniform(-2, 2, (n, d))
    pilot = rng.normal(size=n)
    grads = rng.normal(size=(n, d))
    T = rng.uniform(-4, 4, (m, d))
    return X, pilot, grads, T


# ------------------------------------------------------------- hand examples

def test_two_point_example():
    s = SampleSet([[0.0], [1.0]], [0.0, 1.0])
    g = DerivativeField.gradients([[0.0], [2.0]])
    b = bounds_order_one(s, g, [[2.0]])
    assert b.lower[0] == pytest.approx(1.0, abs=1e-15)
    assert b.upper[0] == pytest.approx(3.0, abs=1e-15)
    assert not b.clamped[0]


def test_single_anchors_of_two_point_example():
    s = SampleSet([[0.0], [1.0]], [0.0, 1.0])
    g = DerivativeField.gradients([[0.0], [2.0]])
    b0 = bounds_order_one(s, g, [[2.0]], anchor_subset=[0])
    b1 = bounds_order_one(s, g, [[2.0]], anchor_subset=[1])
    assert (b0.lower[0], b0.upper[0]) == (0.0, 4.0)
    assert (b1.lower[0], b1.upper[0]) == (1.0, 3.0)


def test_one_dim_quadratic_is_recovered():
    s = SampleSet([[-1.0], [0.0], [1.0]], [1.0, 0.0, 1.0])
    D = DerivativeField.univariate(np.column_stack([[-2.0, 0.0, 2.0], [2.0, 2.0, 2.0]]))
    b = bounds_one_dim(s, D, [[2.0]], q=2)
    assert b.lower[0] == pytest.approx(4.0, abs=1e-12)
    assert b.upper[0] == pytest.approx(4.0, abs=1e-12)


def test_one_dim_order_one_matches_hand_value():
    s = SampleSet([[0.0], [1.0]], [0.0, 1.0])
    D = DerivativeField.univariate([[0.0], [2.0]])
    b = bounds_one_dim(s, D, [[2.0]], q=1)
    assert (b.lower[0], b.upper[0]) == pytest.approx((1.0, 3.0))


@pytest.mark.parametrize("raw, expected", [((1, 3), (1.0, 3.0, False)),
                                           ((3, 1), (2.0, 2.0, True)),
                                           ((5, 5), (5.0, 5.0, False))])
def test_clamp_bounds(raw, expected):
    assert clamp_bounds(*raw) == expected


def test_clamp_rejects_non_finite():
    with pytest.raises(ValueError):
        clamp_bounds(np.nan, 1.0)


def test_crossing_bounds_are_clamped():
    # an anchor whose own gradient is absent from the field yields crossing bounds
    s = SampleSet([[0.0], [1.0]], [0.0, 5.0])
    g = DerivativeField.gradients([[1.0], [1.0]])
    b = bounds_order_one(s, g, [[2.0]])
    assert b.clamped[0]
    assert b.lower[0] == b.upper[0] == pytest.approx(0.5 * (2.0 + 6.0))


def test_identical_gradients_give_linear_extension(rng):
    X = rng.uniform(-1, 1, (20, 3))
    g = np.array([0.5, -1.0, 2.0])
    pilot = 1.0 + X @ g
    s = SampleSet(X, pilot)
    T = rng.uniform(-3, 3, (30, 3))
    b = bounds_order_one(s, DerivativeField.gradients(np.tile(g, (20, 1))), T)
    np.testing.assert_allclose(b.lower, 1.0 + T @ g, atol=1e-12)
    np.testing.assert_allclose(b.upper, 1.0 + T @ g, atol=1e-12)


# ------------------------------------------------------------- oracle checks

@pytest.mark.parametrize("seed", range(40))
def test_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n, d = int(rng.integers(1, 40)), int(rng.integers(1, 4))
    X, pilot, grads, T = _random_instance(rng, n, d)
    b = bounds_order_one(SampleSet(X, pilot), DerivativeField.gradients(grads), T)
    lo, up = brute_force_order_one(X, pilot, grads, T)
    lo, up = np.where(lo > up, (lo + up) / 2, lo), np.where(lo > up, (lo + up) / 2, up)
    np.testing.assert_allclose(b.lower, lo, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(b.upper, up, rtol=1e-12, atol=1e-12)


def test_hull_reduction_does_not_change_values(rng):
    X, pilot, grads, T = _random_instance(rng, 60, 3, 25)
    s, g = SampleSet(X, pilot), DerivativeField.gradients(grads)
    a = bounds_order_one(s, g, T, reduce_hull=True)
    b = bounds_order_one(s, g, T, reduce_hull=False)
    np.testing.assert_allclose(a.lower, b.lower, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(a.upper, b.upper, rtol=1e-12, atol=1e-12)


def test_extreme_rows_cover_all_linear_extremes(rng):
    G = rng.normal(size=(200, 3))
    H = extreme_gradient_rows(G)
    for u in rng.normal(size=(50, 3)):
        assert (H @ u).max() == pytest.approx((G @ u).max(), abs=1e-12)
        assert (H @ u).min() == pytest.approx((G @ u).min(), abs=1e-12)


def test_extreme_rows_degenerate_hull():
    G = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])  # collinear
    H = extreme_gradient_rows(G)
    assert H.shape[0] == 4


def test_backends_agree(backend, rng):
    X, pilot, grads, T = _random_instance(rng, 30, 2, 10)
    anchors = np.arange(30, dtype=np.intp)
    lo, up = backend.bounds_order_one(X, pilot, grads, T, anchors)
    ref_lo, ref_up = brute_force_order_one(X, pilot, grads, T)
    np.testing.assert_allclose(lo, ref_lo, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(up, ref_up, rtol=1e-12, atol=1e-12)


def test_one_dim_q1_agrees_with_order_one(rng):
    X, pilot, grads, T = _random_instance(rng, 25, 1, 40)
    s = SampleSet(X, pilot)
    a = bounds_order_one(s, DerivativeField.gradients(grads), T)
    b = bounds_one_dim(s, DerivativeField.univariate(grads), T, q=1)
    np.testing.assert_allclose(a.lower, b.lower, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(a.upper, b.upper, rtol=1e-12, atol=1e-12)


def test_one_dim_matches_direct_loop(rng):
    n, q = 15, 3
    x = rng.uniform(-1, 1, n)
    pilot = rng.normal(size=n)
    D = rng.normal(size=(n, q))
    T = rng.uniform(-3, 3, 12)
    b = bounds_one_dim(SampleSet(x, pilot), DerivativeField.univariate(D), T[:, None])
    from math import factorial
    for ell, t in enumerate(T):
        los, ups = [], []
        for i in range(n):
            h = t - x[i]
            base = pilot[i] + sum(D[i, k - 1] * h ** k / factorial(k) for k in range(1, q))
            c = [D[k, q - 1] * h ** q / factorial(q) for k in range(n)]
            los.append(base + min(c))
            ups.append(base + max(c))
        lo, up = max(los), min(ups)
        if lo > up:
            lo = up = 0.5 * (lo + up)
        assert b.lower[ell] == pytest.approx(lo, rel=1e-12, abs=1e-12)
        assert b.upper[ell] == pytest.approx(up, rel=1e-12, abs=1e-12)


# ------------------------------------------------------------- properties

@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), c=st.floats(-100, 100))
def test_translation_equivariance(seed, c):
    rng = np.random.default_rng(seed)
    X, pilot, grads, T = _random_instance(rng, 12, 2)
    g = DerivativeField.gradients(grads)
    a = bounds_order_one(SampleSet(X, pilot), g, T)
    b = bounds_order_one(SampleSet(X, pilot + c), g, T)
    np.testing.assert_allclose(b.lower, a.lower + c, atol=1e-9)
    np.testing.assert_allclose(b.upper, a.upper + c, atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), k=st.integers(1, 15))
def test_fewer_anchors_never_tighten(seed, k):
    rng = np.random.default_rng(seed)
    X, pilot, grads, T = _random_instance(rng, 15, 2)
    lo_all, up_all = brute_force_order_one(X, pilot, grads, T)
    subset = rng.choice(15, size=k, replace=False)
    lo_sub, up_sub = brute_force_order_one(X, pilot, grads, T, subset)
    assert np.all(lo_sub <= lo_all + 1e-12)
    assert np.all(up_sub >= up_all - 1e-12)
    # the library matches the brute force on the subset as well
    b = bounds_order_one(SampleSet(X, pilot), DerivativeField.gradients(grads), T, subset)
    cross = lo_sub > up_sub
    np.testing.assert_allclose(b.lower[~cross], lo_sub[~cross], atol=1e-12)
    np.testing.assert_allclose(b.upper[~cross], up_sub[~cross], atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_support_points_are_pinned(seed):
    # exact pilot and gradients of a convex piecewise-linear function
    rng = np.random.default_rng(seed)
    x = np.sort(rng.uniform(-2, 2, 20))
    f = np.abs(x) + 0.5 * x
    g = np.sign(x) + 0.5
    b = bounds_order_one(SampleSet(x, f), DerivativeField.gradients(g), x[:, None])
    np.testing.assert_allclose(b.lower, f, atol=1e-12)
    np.testing.assert_allclose(b.upper, f, atol=1e-12)


# ------------------------------------------------------------- anchors

def test_select_anchors_prefers_low_variation_direction():
    s = SampleSet([[0.0, 0.0], [1.0, 0.0]], [0.0, 0.0])
    g = DerivativeField.gradients([[1.0, 0.0], [3.0, 0.0]])
    assert list(select_anchors(s, g, [0.0, 5.0], 2)) == [0, 1]
    assert list(select_anchors(s, g, [0.0, 5.0], 1)) == [0]


def test_select_anchors_all_when_k_large(rng):
    X = rng.normal(size=(6, 2))
    s = SampleSet(X, np.zeros(6))
    g = DerivativeField.gradients(rng.normal(size=(6, 2)))
    assert list(select_anchors(s, g, [0.0, 0.0], 10)) == list(range(6))


def test_select_anchors_euclidean_fallback():
    X = np.array([[3.0, 0.0], [1.0, 0.0], [0.0, 2.0], [0.0, 0.5]])
    s = SampleSet(X, np.zeros(4))
    g = DerivativeField.gradients(np.ones((4, 2)))
    assert list(select_anchors(s, g, [0.0, 0.0], 3)) == [3, 1, 2]


def test_select_anchors_rejects_zero():
    s = SampleSet([[0.0]], [0.0])
    with pytest.raises(ValueError):
        select_anchors(s, DerivativeField.gradients([[1.0]]), [0.0], 0)


def test_local_bounds_match_subset_bounds(rng):
    X, pilot, grads, T = _random_instance(rng, 30, 2, 5)
    s, g = SampleSet(X, pilot), DerivativeField.gradients(grads)
    loc = bounds_order_one_local(s, g, T, 8, metric="euclidean")
    for ell, t in enumerate(T):
        idx = np.argsort(np.linalg.norm(X - t, axis=1), kind="stable")[:8]
        ref = bounds_order_one(s, g, t[None, :], anchor_subset=idx)
        assert loc.lower[ell] == pytest.approx(ref.lower[0], abs=1e-12)
        assert loc.upper[ell] == pytest.approx(ref.upper[0], abs=1e-12)
    loc_g = bounds_order_one_local(s, g, T, 8, metric="gradient")
    assert np.all(loc_g.lower <= loc_g.upper)


# ------------------------------------------------------------- validation

def test_input_validation():
    s = SampleSet([[0.0, 1.0]], [0.0])
    g = DerivativeField.gradients([[1.0, 1.0]])
    with pytest.raises(ValueError):
        bounds_order_one(s, g, [[0.0, 1.0, 2.0]])
    with pytest.raises(ValueError):
        bounds_order_one(s, g, [[np.nan, 1.0]])
    with pytest.raises(ValueError):
        bounds_order_one(s, g, [[0.0, 1.0]], anchor_subset=[])
    with pytest.raises(ValueError):
        SampleSet([[0.0]], [np.inf])
    with pytest.raises(ValueError):
        bounds_one_dim(s, DerivativeField.univariate([[1.0]]), [[0.0]])
    with pytest.raises(ValueError):
        BoundTable(np.zeros((1, 1)), [1.0], [0.0])


def test_empty_targets():
    s = SampleSet([[0.0]], [1.0])
    b = bounds_order_one(s, DerivativeField.gradients([[1.0]]), np.empty((0, 1)))
    assert len(b) == 0
