"""Randomized invariants checked with hypothesis."""

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_allclose, assert_array_equal

from marac.data_io import center_by_train_mean, read_bundle, write_bundle
from marac.estimator import enforce_identifiability
from marac.linalg import kron, kron_diff_bound, spd_solve, tvp, vec
from marac.series import MatrixSeries
from marac.stationarity import check_stationarity

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
dims = st.integers(1, 4)
seeds = st.integers(0, 2**32 - 1)


def mats(rows, cols):
    return arrays(np.float64, (rows, cols), elements=finite)


@given(seeds, dims, dims, st.floats(-5, 5))
def test_kron_bilinear(seed, m, n, alpha):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((m, n)), rng.standard_normal((n, m))
    assert_allclose(kron(alpha * a, b), alpha * kron(a, b), rtol=1e-14, atol=1e-300)


@given(seeds, dims, dims, dims, finite, finite)
def test_tvp_linear(seed, M, N, D, alpha, beta):
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((M, N, D))
    z1, z2 = rng.standard_normal(D), rng.standard_normal(D)
    lhs = tvp(g, alpha * z1 + beta * z2)
    rhs = alpha * tvp(g, z1) + beta * tvp(g, z2)
    assert_allclose(lhs, rhs, atol=1e-12 * (1 + np.abs(rhs).max()))


@settings(max_examples=200)
@given(seeds, dims, dims)
def test_kron_diff_bound_dominates(seed, m, n):
    rng = np.random.default_rng(seed)
    an, ao = rng.standard_normal((m, m)), rng.standard_normal((m, m))
    bn, bo = rng.standard_normal((n, n)), rng.standard_normal((n, n))
    true = np.linalg.norm(kron(bn, an) - kron(bo, ao))
    assert kron_diff_bound(an, ao, bn, bo) >= true - 1e-12


@given(seeds, st.integers(1, 8), st.floats(0, 6))
def test_spd_solve_residual(seed, n, log_cond):
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    w = np.logspace(0, log_cond, n)
    a = (Q * w) @ Q.T
    a = 0.5 * (a + a.T)
    b = rng.standard_normal((n, 2))
    x = spd_solve(a, b)
    assert np.linalg.norm(a @ x - b) <= 1e-9 * np.linalg.norm(b)


@given(seeds, dims, dims, st.floats(0.1, 10) | st.floats(-10, -0.1))
def test_rescale_invariance_of_bilinear_term(seed, M, N, c):
    rng = np.random.default_rng(seed)
    A, B, X = rng.standard_normal((M, M)), rng.standard_normal((N, N)), rng.standard_normal((M, N))
    ref = A @ X @ B.T
    assert_allclose((c * A) @ X @ (B / c).T, ref, atol=1e-12 * (1 + np.abs(ref).max()))
    assert_allclose(kron(B, A) @ vec(X), vec(ref), atol=1e-12 * (1 + np.abs(ref).max()))


@given(seeds, dims, dims)
def test_identifiability_normalizes(seed, M, N):
    rng = np.random.default_rng(seed)
    A0, B0 = rng.standard_normal((M, M)), rng.standard_normal((N, N))
    A, B = enforce_identifiability(A0, B0)
    assert abs(np.linalg.norm(A) - 1) <= 1e-10
    assert np.trace(A) >= -1e-12
    assert_allclose(kron(B, A), kron(B0, A0), atol=1e-12 * (1 + np.abs(kron(B0, A0)).max()))


@given(seeds, st.integers(1, 3), dims, st.floats(0.2, 5))
def test_stationarity_scaling_invariance(seed, P, k, c):
    rng = np.random.default_rng(seed)
    A = [rng.standard_normal((k, k)) for _ in range(P)]
    B = [rng.standard_normal((k, k)) for _ in range(P)]
    r1 = check_stationarity(A, B).marac_radius
    r2 = check_stationarity([c * a for a in A], [b / c for b in B]).marac_radius
    assert_allclose(r2, r1, rtol=1e-10, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 6), dims, dims),
              elements=st.floats(allow_nan=False, allow_infinity=False, width=64)))
def test_bundle_round_trip_bitwise(X):
    import tempfile

    T = X.shape[0]
    z = np.arange(T, dtype=float)[:, None]
    with tempfile.TemporaryDirectory() as d:
        write_bundle(MatrixSeries(X, z), (1, T), d)
        back = read_bundle(d)
    assert back.series.X.tobytes() == X.tobytes()
    assert_array_equal(back.series.z, z)


@given(seeds, st.integers(2, 10), dims, dims)
def test_centering_round_trip(seed, T, M, N):
    rng = np.random.default_rng(seed)
    X = rng.normal(5.0, 3.0, (T, M, N))
    centered, means = center_by_train_mean(MatrixSeries(X, None), (max(1, T // 2), T))
    assert_allclose(means.decenter(centered.X), X, atol=1e-12)
