import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from extrabounds.bounds import SampleSet
from extrabounds.forest import ForestParams, extract_weights, fit_poly_forest
from extrabounds.locpol import weighted_locpol
from extrabounds.tuning import (TuningGrid, default_forest_grid, fold_indices, holdout_losses,
                                loss_values, select_from_losses, tune)


def transcribed_rule(E, tol):
    """Loop-by-loop transcription of the selection rule."""
    K, L, n = E.shape
    means = [[sum(E[k, l]) / n for l in range(L)] for k in range(K)]
    best = min((means[k][l], k, l) for k in range(K) for l in range(L))
    _, kb, lb = best

    def S(k, l):
        return (sum((E[kb, lb, i] - E[k, l, i]) ** 2 for i in range(n)) / n) ** 0.5 / n ** 0.5

    def ok(k, l):
        return means[k][l] <= means[kb][lb] + tol * S(k, l)

    k_star = min(k for k in range(K) if any(ok(k, l) for l in range(L)))
    l_star = min(l for l in range(L) if ok(k_star, l))
    return k_star, l_star


def test_all_ties_select_most_regularized():
    E = np.ones((3, 4, 10))
    assert select_from_losses(E, 1.0)[:2] == (0, 0)
    assert select_from_losses(E, 0.0)[:2] == (0, 0)


def test_hand_constructed_table():
    n = 4
    E = np.zeros((2, 2, n))
    E[1, 1] = [0.0, 0.0, 0.0, 0.0]       # best
    E[0, 0] = [4.0, 4.0, 4.0, 4.0]       # mean 4, S = 2, outside the band at tol 1
    E[0, 1] = [0.0, 0.0, 0.0, 2.0]       # mean 0.5, S = 0.5, inside the band
    E[1, 0] = [3.0, 3.0, 3.0, 3.0]
    k, l, band = select_from_losses(E, 1.0)
    assert (k, l) == (0, 1)
    assert not band[0, 0] and band[0, 1]
    assert (k, l) == transcribed_rule(E, 1.0)


def test_zero_tolerance_selects_argmin():
    rng = np.random.default_rng(0)
    E = rng.uniform(size=(4, 3, 20))
    k, l, _ = select_from_losses(E, 0.0)
    means = E.mean(axis=2)
    assert means[k, l] == means.min()


def test_infinite_tolerance_selects_first():
    rng = np.random.default_rng(1)
    assert select_from_losses(rng.uniform(size=(3, 3, 5)), np.inf)[:2] == (0, 0)


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**31), K=st.integers(1, 4), L=st.integers(1, 4),
       tol=st.sampled_from([0.0, 0.5, 1.0, 2.0]))
def test_rule_matches_transcription(seed, K, L, tol):
    rng = np.random.default_rng(seed)
    E = rng.exponential(size=(K, L, 8))
    assert select_from_losses(E, tol)[:2] == transcribed_rule(E, tol)


def test_loss_values():
    np.testing.assert_allclose(loss_values(np.array([1.0]), np.array([3.0])), [4.0])
    np.testing.assert_allclose(loss_values(np.array([1.0, 1.0]), np.array([3.0, -1.0]),
                                           "pinball", 0.2), [0.4, 1.6])
    with pytest.raises(ValueError):
        loss_values(np.zeros(1), np.zeros(1), "huber")


def test_folds_partition_and_are_seeded():
    f = fold_indices(23, 5, 3)
    assert sorted(np.concatenate(f).tolist()) == list(range(23))
    assert [len(p) for p in f] == [5, 5, 5, 4, 4]
    assert all(np.array_equal(a, b) for a, b in zip(f, fold_indices(23, 5, 3)))
    with pytest.raises(ValueError):
        fold_indices(3, 5, 0)


def test_grid_validation():
    with pytest.raises(ValueError):
        TuningGrid(penalties=(1.0, 2.0))
    with pytest.raises(ValueError):
        TuningGrid(forest_params=())
    with pytest.raises(ValueError):
        TuningGrid(folds=1)
    g = TuningGrid()
    assert [p.impurity_tol for p in g.forest_params] == [100.0, 10.0, 1.0, 0.1, 0.01]
    assert g.penalties == (10.0, 1.0, 0.1, 0.01, 0.001, 0.0)
    assert (g.tol, g.folds) == (1.0, 5)


def _samples(seed=0, n=60):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, (n, 2))
    return SampleSet(X, np.abs(X[:, 0]) + 0.05 * rng.normal(size=n))


def test_zero_penalty_holdout_matches_direct_refit():
    s = _samples()
    W = extract_weights(fit_poly_forest(s, [1.0, 0.0], 1, ForestParams(n_trees=10, seed=0)))
    folds = fold_indices(s.n, 3, 0)
    E = holdout_losses(s, np.array([1.0, 0.0]), 1, W, [0.0], folds)
    for idx in folds:
        keep = np.ones(s.n, dtype=bool)
        keep[idx] = False
        Wm = W * keep[None, :]
        ok = Wm[idx].sum(axis=1) > 0
        sub = idx[ok]
        rows = np.where(np.isin(np.arange(s.n), sub)[:, None], Wm, W)
        pred = weighted_locpol(s, rows, [1.0, 0.0], 1).beta[sub, 0]
        np.testing.assert_allclose(E[0, sub], (pred - s.pilot[sub]) ** 2, rtol=1e-6, atol=1e-12)


def test_singleton_grid_echoes_entry():
    s = _samples(1)
    p = ForestParams(n_trees=5, seed=1, impurity_tol=0.5)
    r = tune(s, [1.0, 0.0], TuningGrid((p,), (0.3,), folds=3))
    assert r.params == p and r.penalty == 0.3 and (r.k, r.l) == (0, 0)


def test_tune_is_deterministic():
    s = _samples(2)
    grid = TuningGrid(default_forest_grid(ForestParams(n_trees=5, seed=2)), (1.0, 0.0), folds=3)
    a = tune(s, [1.0, 0.0], grid)
    b = tune(s, [1.0, 0.0], grid)
    assert (a.k, a.l) == (b.k, b.l)
    np.testing.assert_array_equal(a.losses, b.losses)
    assert a.mean_losses.shape == (5, 2)
