import numpy as np
import pytest

from marac.estimator import FitOptions, FitState
from marac.kernels import SPHERE, GridSpec, KernelContext
from marac.series import MatrixSeries


def random_spd(rng, n, ridge=1.0):
    a = rng.standard_normal((n, n))
    return a @ a.T / n + ridge * np.eye(n)


def random_series(rng, T, M, N, D):
    return MatrixSeries(rng.standard_normal((T, M, N)), rng.standard_normal((T, D)))


def simulate_small(rng, T, M, N, D, scale=0.5, noise=1.0, ctx=None, g_scale=1.0):
    """Tiny MARAC(1,1) generator used where the full simulator would be overkill."""
    A = np.diag(rng.uniform(0.5, 0.9, M)) * scale
    B = np.diag(rng.uniform(0.5, 0.9, N))
    G = g_scale * rng.standard_normal((M, N, D))
    z = rng.standard_normal((T, D))
    X = np.zeros((T, M, N))
    for t in range(1, T):
        X[t] = A @ X[t - 1] @ B.T + G @ z[t - 1] + noise * rng.standard_normal((M, N))
    return MatrixSeries(X, z), A, B, G


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def ctx3():
    return KernelContext.build(GridSpec(SPHERE, 3, 3))


@pytest.fixture
def state3(rng, ctx3):
    """A mid-fit state on a random 3x3 instance with non-trivial covariances."""
    series = simulate_small(rng, 50, 3, 3, 2)[0]
    state = FitState(series, 1, 1, ctx3, FitOptions(lam=0.05))
    state.set_coef(0, 0.1 * rng.standard_normal((9, 2)))
    state.set_sigma(random_spd(rng, 3), random_spd(rng, 3))
    return state


ACCEPTANCE_LINES = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    def record(label, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} {label}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
