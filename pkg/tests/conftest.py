import numpy as np
import pytest

from extrabounds._backend import get_kernels


def brute_force_order_one(X, pilot, grads, targets, anchors=None):
    """Direct double loop over anchors and derivative rows."""
    X = np.atleast_2d(X)
    n = X.shape[0]
    anchors = range(n) if anchors is None else anchors
    lo, up = [], []
    for t in np.atleast_2d(targets):
        best_lo, best_up = -np.inf, np.inf
        for i in anchors:
            vals = [float(np.dot(grads[k], t - X[i])) for k in range(n)]
            best_lo = max(best_lo, pilot[i] + min(vals))
            best_up = min(best_up, pilot[i] + max(vals))
        lo.append(best_lo)
        up.append(best_up)
    return np.array(lo), np.array(up)


def _available_backends():
    names = ["python"]
    try:
        get_kernels("compiled")
        names.append("compiled")
    except ImportError:
        pass
    return names


@pytest.fixture(params=_available_backends())
def backend(request):
    return get_kernels(request.param)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num}: {'PASS' if ok else 'FAIL'}  {detail}")
