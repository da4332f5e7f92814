import csv
import json
import subprocess
import sys
import time

import numpy as np
import pytest

from extrabounds.cli import EXIT_COMPUTE, EXIT_INPUT, EXIT_OK, main

SMALL_FOREST = {"n_trees": 20, "min_samples_leaf": 5}


def _write_csv(path, X, **cols):
    X = np.atleast_2d(np.asarray(X, float))
    names = [f"x{j + 1}" for j in range(X.shape[1])] + list(cols)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for i in range(X.shape[0]):
            w.writerow([repr(float(v)) for v in X[i]] + [repr(float(c[i])) for c in cols.values()])
    return str(path)


def _read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return rows


def _config(tmp_path, **cfg):
    cfg = {"version": 1, **cfg}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.fixture
def linear_data(tmp_path):
    rng = np.random.default_rng(0)
    X = rng.uniform(-1, 1, (80, 1))
    pilot = 1.0 + 2.0 * X[:, 0]
    T = rng.uniform(-3, 3, (15, 1))
    return (_write_csv(tmp_path / "pilot.csv", X, pilot=pilot),
            _write_csv(tmp_path / "targets.csv", T), T)


@pytest.fixture
def noisy_data(tmp_path):
    rng = np.random.default_rng(1)
    X = rng.uniform(0, 1, (120, 1))
    y = np.sin(3 * X[:, 0]) + 0.1 * rng.standard_normal(120)
    T = np.array([[0.5], [1.5], [-0.5]])
    return (_write_csv(tmp_path / "train.csv", X, y=y),
            _write_csv(tmp_path / "targets.csv", T))


def test_pilot_single_row(tmp_path):
    train = _write_csv(tmp_path / "t.csv", [[0.3, 0.7]], y=[2.5])
    out = tmp_path / "p.csv"
    assert main(["pilot", "--train", train, "--out", str(out)]) == EXIT_OK
    rows = _read_csv(out)
    assert len(rows) == 1 and float(rows[0]["pilot"]) == pytest.approx(2.5, rel=1e-12)


def test_pilot_missing_response_column(tmp_path, capsys):
    train = _write_csv(tmp_path / "t.csv", [[0.3]], z=[1.0])
    assert main(["pilot", "--train", train, "--out", str(tmp_path / "p.csv")]) == EXIT_INPUT
    assert "'y'" in capsys.readouterr().err


def test_malformed_rows_rejected(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("x1,y\n0.1,abc\n")
    assert main(["pilot", "--train", str(bad), "--out", str(tmp_path / "o.csv")]) == EXIT_INPUT
    bad.write_text("a,y\n0.1,1\n")
    assert main(["pilot", "--train", str(bad), "--out", str(tmp_path / "o.csv")]) == EXIT_INPUT


def test_pilot_is_byte_identical_across_runs(noisy_data, tmp_path):
    train, _ = noisy_data
    cfg = _config(tmp_path, pilot_forest=SMALL_FOREST)
    outs = []
    for k in range(2):
        out = tmp_path / f"p{k}.csv"
        assert main(["pilot", "--train", train, "--out", str(out), "--config", cfg,
                     "--quantiles"]) == EXIT_OK
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    assert b"pilot_qlo" in outs[0].splitlines()[0]


def test_bounds_linear_pilot_zero_width(linear_data, tmp_path):
    pilot, targets, T = linear_data
    cfg = _config(tmp_path, forest={"n_trees": 20}, penalty=0.0)
    out = tmp_path / "b.csv"
    assert main(["bounds", "--pilot", pilot, "--targets", targets, "--out", str(out),
                 "--config", cfg]) == EXIT_OK
    rows = _read_csv(out)
    assert len(rows) == 15
    assert max(float(r["width"]) for r in rows) < 1e-6
    truth = 1.0 + 2.0 * T[:, 0]
    np.testing.assert_allclose([float(r["mid"]) for r in rows], truth, atol=1e-6)


def test_bounds_empty_targets(linear_data, tmp_path):
    pilot, _, _ = linear_data
    empty = tmp_path / "empty.csv"
    empty.write_text("x1\n")
    out = tmp_path / "b.csv"
    assert main(["bounds", "--pilot", pilot, "--targets", str(empty), "--out", str(out)]) == EXIT_OK
    assert out.read_text() == "x1,lower,upper,mid,width,clamped\n"


def test_bounds_dimension_mismatch(linear_data, tmp_path):
    pilot, _, _ = linear_data
    t1 = _write_csv(tmp_path / "t1.csv", [[0.0, 1.0]])
    assert main(["bounds", "--pilot", pilot, "--targets", t1,
                 "--out", str(tmp_path / "o.csv")]) == EXIT_INPUT


def test_bounds_at_training_points_track_pilot(noisy_data, tmp_path):
    train, _ = noisy_data
    X = np.linspace(0, 1, 60)[:, None]
    pilot = _write_csv(tmp_path / "pil.csv", X, pilot=X[:, 0] ** 2)
    targets = _write_csv(tmp_path / "t.csv", X[::6])
    cfg = _config(tmp_path, forest={"n_trees": 30, "min_samples_leaf": 5}, penalty=0.01)
    out = tmp_path / "b.csv"
    assert main(["bounds", "--pilot", pilot, "--targets", targets, "--out", str(out),
                 "--config", cfg]) == EXIT_OK
    rows = _read_csv(out)
    mid = np.array([float(r["mid"]) for r in rows])
    exact = np.array([r["clamped"] == "0" for r in rows])
    # unclamped rows reproduce the pilot; clamped ones (biased edge slopes) stay close
    assert exact.any()
    np.testing.assert_allclose(mid[exact], X[::6, 0][exact] ** 2, atol=1e-12)
    np.testing.assert_allclose(mid, X[::6, 0] ** 2, atol=0.02)


def test_tune_singleton_grid_echoes_entry(linear_data, tmp_path):
    pilot, _, _ = linear_data
    entry = {"n_trees": 15, "min_samples_leaf": 4, "impurity_tol": 0.5}
    cfg = _config(tmp_path, forest_grid=[entry], penalties=[0.3], folds=3)
    out = tmp_path / "tune.json"
    assert main(["tune", "--pilot", pilot, "--out", str(out), "--config", cfg]) == EXIT_OK
    res = json.loads(out.read_text())
    assert len(res["directions"]) == 1
    for d in res["directions"]:
        assert d["penalty"] == 0.3 and (d["forest_index"], d["penalty_index"]) == (0, 0)
        for key, val in entry.items():
            assert d["forest"][key] == val


def test_score_with_fixed_sigma(noisy_data, tmp_path):
    train, targets = noisy_data
    cfg = _config(tmp_path, pilot_forest=SMALL_FOREST, forest=SMALL_FOREST, penalty=0.01)
    out = tmp_path / "s.csv"
    assert main(["score", "--train", train, "--targets", targets, "--out", str(out),
                 "--config", cfg, "--sigma", "0.1"]) == EXIT_OK
    rows = _read_csv(out)
    for r in rows:
        assert float(r["score"]) == pytest.approx(float(r["width"]) / 0.1)
    assert float(rows[0]["score"]) < float(rows[1]["score"])


def test_intervals_columns(noisy_data, tmp_path):
    train, targets = noisy_data
    cfg = _config(tmp_path, pilot_forest=SMALL_FOREST, forest=SMALL_FOREST, penalty=0.01,
                  alpha=0.2)
    out = tmp_path / "iv.csv"
    assert main(["intervals", "--train", train, "--targets", targets, "--out", str(out),
                 "--config", cfg]) == EXIT_OK
    for r in _read_csv(out):
        assert float(r["lo"]) <= float(r["hi"]) and r["crossed"] in ("0", "1")


def test_bad_config_exit_code(tmp_path, linear_data):
    pilot, targets, _ = linear_data
    for cfg in ({"version": 2}, {"version": 1, "q": 0}, {"version": 1, "unknown": 1}):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(cfg))
        assert main(["bounds", "--pilot", pilot, "--targets", targets,
                     "--out", str(tmp_path / "o.csv"), "--config", str(path)]) == EXIT_INPUT
    path.write_text("{not json")
    assert main(["bounds", "--pilot", pilot, "--targets", targets,
                 "--out", str(tmp_path / "o.csv"), "--config", str(path)]) == EXIT_INPUT


def test_compute_failure_exit_code(tmp_path):
    X = np.random.default_rng(2).uniform(size=(30, 2))
    pilot = _write_csv(tmp_path / "p2.csv", X, pilot=X.sum(axis=1))
    targets = _write_csv(tmp_path / "t2.csv", X[:3])
    # second-order bounds need one covariate
    cfg = _config(tmp_path, q=2, forest={"n_trees": 5}, penalty=0.0)
    assert main(["bounds", "--pilot", pilot, "--targets", targets,
                 "--out", str(tmp_path / "o.csv"), "--config", cfg]) == EXIT_COMPUTE


def test_simulate_small_run(tmp_path):
    out = tmp_path / "sim.csv"
    cfg = _config(tmp_path, forest_grid=[{"n_trees": 20, "impurity_tol": 1.0}],
                  penalties=[0.1, 0.01])
    start = time.perf_counter()
    assert main(["simulate", "--ns", "100", "--d", "1", "--reps", "1", "--out", str(out),
                 "--config", cfg]) == EXIT_OK
    assert time.perf_counter() - start < 30
    rows = _read_csv(out)
    assert len(rows) == 1 and rows[0]["n"] == "100"
    assert float(rows[0]["rmse_out"]) >= 0


def test_simulate_rejects_tiny_n(tmp_path):
    assert main(["simulate", "--ns", "2", "--out", str(tmp_path / "s.csv")]) == EXIT_INPUT


def test_module_entry_point(tmp_path):
    train = _write_csv(tmp_path / "t.csv", [[0.0], [1.0]], y=[1.0, 2.0])
    out = tmp_path / "p.csv"
    proc = subprocess.run([sys.executable, "-m", "extrabounds", "pilot", "--train", train,
                           "--out", str(out)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert out.read_text().startswith("x1,pilot\n")
