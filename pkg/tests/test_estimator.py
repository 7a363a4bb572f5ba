import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from sklearn.base import clone

import marac.estimator as est
from marac.baselines import fit_mar
from marac.benchmark import DEFAULT_LAMBDAS
from marac.estimator import (
    MARAC,
    FitOptions,
    FitState,
    enforce_identifiability,
    fit,
    tune_lambda,
    update_A,
    update_B,
    update_gamma,
    update_sigma,
    update_theta,
)
from marac.exceptions import ContractError, ConvergenceError, InsufficientDataError, SingularityError
from marac.kernels import PLANAR, SPHERE, GridSpec, KernelContext, ProductKernel
from marac.series import MatrixSeries

from conftest import random_spd, simulate_small


def numeric_grad(state, getter, setter, h=1e-6):
    base = getter().copy()
    g = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        for sign in (1, -1):
            pert = base.copy()
            pert[idx] += sign * h
            setter(pert)
            g[idx] += sign * state.objective()
        g[idx] /= 2 * h
    setter(base)
    return g


def block_accessors(state, name, k):
    if name == "A":
        return lambda: state.A[k], lambda v: state.set_A(k, v)
    if name == "B":
        return lambda: state.B[k], lambda v: state.set_B(k, v)
    return lambda: state.coef[k], lambda v: state.set_coef(k, v)


# update_A / update_B -------------------------------------------------------

def test_update_A_recovers_noiseless_least_squares(rng):
    A_star = 0.5 * rng.standard_normal((3, 3))
    X = np.zeros((40, 3, 3))
    X[0] = rng.standard_normal((3, 3))
    for t in range(1, 40):
        X[t] = A_star @ X[t - 1] + 0.5 * rng.standard_normal((3, 3)) * (t < 20)
    # exact relation holds on frames where the innovation vanishes
    series = MatrixSeries(X[19:], np.zeros((21, 0)))
    state = FitState(series, 1, 0, None, FitOptions(lam=0.0))
    state.set_B(0, np.eye(3))
    assert_allclose(update_A(0, state), A_star, atol=1e-10)


def test_update_B_via_transposed_series(rng):
    series = simulate_small(rng, 60, 3, 4, 1)[0]
    s1 = FitState(series, 1, 0, None, FitOptions(lam=0.0))
    s1.set_A(0, random_spd(rng, 3))
    s1.set_sigma(random_spd(rng, 3), random_spd(rng, 4))
    transposed = MatrixSeries(series.X.transpose(0, 2, 1), series.z)
    s2 = FitState(transposed, 1, 0, None, FitOptions(lam=0.0))
    s2.set_B(0, s1.A[0])
    s2.set_sigma(s1.sigma_c, s1.sigma_r)
    assert_allclose(update_B(0, s1), update_A(0, s2), atol=1e-10)


def test_degenerate_predictors_raise(rng):
    series = MatrixSeries(np.zeros((10, 3, 3)), np.zeros((10, 0)))
    state = FitState(series, 1, 0, None, FitOptions(lam=0.0))
    with pytest.raises(SingularityError):
        update_A(0, state)
    series = MatrixSeries(rng.standard_normal((10, 3, 3)), np.zeros((10, 0)))
    state = FitState(series, 1, 0, None, FitOptions(lam=0.0))
    state.set_A(0, np.zeros((3, 3)))
    with pytest.raises(SingularityError):
        update_B(0, state)


@pytest.mark.parametrize("name", ["A", "B", "coef"])
def test_block_update_zeroes_gradient(state3, name):
    get, put = block_accessors(state3, name, 0)
    start_grad = numeric_grad(state3, get, put)
    upd = {"A": update_A, "B": update_B, "coef": update_gamma}[name]
    put(upd(0, state3))
    grad = numeric_grad(state3, get, put)
    assert np.linalg.norm(grad) <= 1e-5 * (1 + np.linalg.norm(start_grad))


def test_analytic_gradient_norms_match_finite_differences(state3):
    report = est.block_gradient_norms(state3)
    for name, key in (("A", "A1"), ("B", "B1"), ("coef", "coef1")):
        get, put = block_accessors(state3, name, 0)
        assert_allclose(report[key], np.linalg.norm(numeric_grad(state3, get, put)), rtol=1e-5)


# update_gamma ------------------------------------------------------------

def test_update_gamma_zero_covariates(ctx3, rng):
    series = MatrixSeries(rng.standard_normal((30, 3, 3)), np.zeros((30, 2)))
    state = FitState(series, 1, 1, ctx3, FitOptions(lam=0.1))
    assert_array_equal(update_gamma(0, state), np.zeros((9, 2)))


def test_update_gamma_scalar_ridge(rng):
    grid = GridSpec(SPHERE, 2, 2)
    ctx = KernelContext(grid=grid, kernel=None, gram=np.eye(4))
    series = MatrixSeries(rng.standard_normal((25, 2, 2)), rng.standard_normal((25, 1)))
    lam = 0.3
    state = FitState(series, 0, 1, ctx, FitOptions(lam=lam))
    z = series.z[:-1, 0]
    x = series.X[1:].transpose(0, 2, 1).reshape(24, 4)
    expected = (z @ x) / (z @ z + lam * 24)
    assert_allclose(update_gamma(0, state)[:, 0], expected, atol=1e-12)


def test_update_gamma_normal_equations(state3):
    gamma = update_gamma(0, state3)
    K = state3.ctx.gram
    Sinv = np.linalg.inv(np.kron(state3.sigma_c, state3.sigma_r))
    Xt = state3.residual() + state3.aux[0]
    Tp = state3.Tp
    total = np.zeros(9 * 2)
    for t in range(Tp):
        z = state3.Zlag[0][t]
        xt = Xt[t].reshape(-1, order="F")
        ZK = np.kron(z[:, None], K)  # (z (x) K), (SD, S)
        total += ZK @ Sinv @ (ZK.T @ gamma.reshape(-1, order="F") - xt)
    total = total / Tp + state3.lam * np.kron(np.eye(2), K) @ gamma.reshape(-1, order="F")
    assert np.linalg.norm(total) <= 1e-8


def test_eigen_route_matches_dense_system(state3, monkeypatch):
    dense = update_gamma(0, state3)
    monkeypatch.setattr(est, "DENSE_SYSTEM_LIMIT", 0)
    assert_allclose(update_gamma(0, state3), dense, atol=1e-9)


# update_sigma ------------------------------------------------------------

def test_update_sigma_monte_carlo(rng):
    R = rng.standard_normal((10000, 3, 3))
    state = FitState(MatrixSeries(R, np.zeros((10000, 0))), 0, 0, None, FitOptions(lam=0.0))
    sr, sc = update_sigma(state)
    assert np.linalg.norm(sr - np.eye(3)) <= 0.1
    assert np.linalg.norm(sc - np.eye(3)) <= 0.1
    assert_allclose(np.trace(sr), 3.0)


def test_update_sigma_zero_residual_is_floored():
    state = FitState(MatrixSeries(np.zeros((1, 3, 2)), np.zeros((1, 0))), 0, 0, None, FitOptions(lam=0.0))
    sr, sc = update_sigma(state)
    for s in (sr, sc):
        assert_allclose(s, np.diag(np.diag(s)), atol=0)
        assert np.all(np.diag(s) > 0)


def test_update_sigma_outputs_are_spd(state3):
    for diag in (False, True):
        state3.opts.diag_sigma = diag
        sr, sc = update_sigma(state3)
        np.linalg.cholesky(sr)
        np.linalg.cholesky(sc)
        if diag:
            assert np.count_nonzero(sr - np.diag(np.diag(sr))) == 0


# update_theta ------------------------------------------------------------

def _planar_states(rng, lam):
    grid = GridSpec(PLANAR, 3, 3)
    exact_ctx = KernelContext.build(grid, ProductKernel())
    full_ctx = exact_ctx.with_truncation(9)
    series = simulate_small(rng, 80, 3, 3, 2)[0]
    exact = FitState(series, 1, 1, exact_ctx, FitOptions(lam=lam))
    trunc = FitState(series, 1, 1, full_ctx, FitOptions(lam=lam, mode="truncated", R=9))
    return exact, trunc


def test_update_theta_matches_exact_with_complete_basis(rng):
    exact, trunc = _planar_states(rng, 0.05)
    assert_allclose(trunc.ctx.basis * trunc.ctx.eigenvalues @ trunc.ctx.basis.T, exact.ctx.gram, atol=1e-8)
    G_exact = exact.ctx.gram @ update_gamma(0, exact)
    G_trunc = trunc.ctx.basis @ update_theta(0, trunc)
    assert_allclose(G_trunc, G_exact, atol=1e-6)


def test_update_theta_shrinks_to_zero(rng):
    _, trunc = _planar_states(rng, 1e12)
    assert np.linalg.norm(update_theta(0, trunc)) <= 1e-6


def test_update_theta_scalar_closed_form(rng):
    grid = GridSpec(SPHERE, 2, 2)
    ctx = KernelContext.build(grid, R=1)
    series = MatrixSeries(rng.standard_normal((30, 2, 2)), rng.standard_normal((30, 1)))
    lam = 0.2
    state = FitState(series, 0, 1, ctx, FitOptions(lam=lam, mode="truncated", R=1))
    k = ctx.basis[:, 0]
    z = series.z[:-1, 0]
    x = series.X[1:].transpose(0, 2, 1).reshape(29, 4)
    expected = (z @ x @ k) / ((z @ z) * (k @ k) + lam * 29 / ctx.eigenvalues[0])
    assert_allclose(update_theta(0, state)[0, 0], expected, atol=1e-12)


# identifiability ---------------------------------------------------------

def test_enforce_identifiability_examples(rng):
    A, B = enforce_identifiability(2 * np.eye(2), np.eye(2))
    assert_allclose(A, np.eye(2) / np.sqrt(2), atol=1e-15)
    assert_allclose(B, 2 * np.sqrt(2) * np.eye(2), atol=1e-15)
    A0, B0 = -np.diag([1.0, 2.0]), rng.standard_normal((2, 2))
    A, B = enforce_identifiability(A0, B0)
    assert np.trace(A) >= 0
    assert_allclose(np.kron(B, A), np.kron(B0, A0), atol=1e-14)
    A2, B2 = enforce_identifiability(A, B)
    assert_allclose(A2, A, atol=1e-14)
    assert_allclose(B2, B, atol=1e-14)
    with pytest.raises(ContractError):
        enforce_identifiability(np.zeros((2, 2)), B0)


# fit -------------------------------------------------------------------------

def test_fit_noiseless_recovery(rng):
    ctx = KernelContext.build(GridSpec(SPHERE, 3, 3))
    series, A, B, G = simulate_small(rng, 200, 3, 3, 2, noise=0.0)
    series.X[0] = rng.standard_normal((3, 3))
    for t in range(1, 200):
        series.X[t] = A @ series.X[t - 1] @ B.T + G @ series.z[t - 1]
    model, _ = fit(series, 1, 1, ctx, FitOptions(lam=1e-8, max_iters=500, rel_tol=1e-8))
    assert np.linalg.norm(np.kron(model.B[0], model.A[0]) - np.kron(B, A)) <= 1e-3
    assert np.linalg.norm(model.coef_tensor(1) - G) <= 1e-2


def test_fit_with_q0_equals_mar(rng):
    series = simulate_small(rng, 120, 3, 4, 2)[0]
    opts = FitOptions(lam=0.0)
    model, _ = fit(series, 2, 0, None, opts)
    mar, _ = fit_mar(series, 2, opts)
    for a, b in zip(model.A + model.B, mar.A + mar.B):
        assert_array_equal(a, b)


def test_fit_insufficient_data(rng):
    with pytest.raises(InsufficientDataError):
        fit(MatrixSeries(rng.standard_normal((1, 2, 2)), np.zeros((1, 0))), 1, 0)


def test_fit_exact_mode_requires_positive_lambda(rng, ctx3):
    with pytest.raises(ContractError):
        fit(simulate_small(rng, 40, 3, 3, 1)[0], 1, 1, ctx3, FitOptions(lam=0.0))


def test_objective_monotone_across_blocks(rng):
    ctx = KernelContext.build(GridSpec(SPHERE, 3, 3))
    for _ in range(5):
        series = simulate_small(rng, 50, 3, 3, 2)[0]
        _, report = fit(series, 2, 2, ctx, FitOptions(lam=0.05, record_blocks=True, max_iters=30))
        steps = np.diff(report.block_objectives)
        assert np.all(steps <= 1e-9)
        assert np.all(np.diff(report.objective_trace) <= 1e-9)


def test_identifiability_after_fit(rng, ctx3):
    series = simulate_small(rng, 80, 3, 3, 2)[0]
    model, _ = fit(series, 2, 1, ctx3, FitOptions(lam=0.1))
    for A in model.A:
        assert abs(np.linalg.norm(A) - 1) <= 1e-10
        assert np.trace(A) >= -1e-12


def test_exact_and_truncated_agree_with_complete_basis(rng):
    grid = GridSpec(PLANAR, 3, 3)
    ctx = KernelContext.build(grid, ProductKernel())
    series = simulate_small(rng, 150, 3, 3, 2)[0]
    tight = dict(lam=0.05, rel_tol=1e-10, max_iters=1000)
    exact, _ = fit(series, 1, 1, ctx, FitOptions(**tight))
    trunc, _ = fit(series, 1, 1, ctx.with_truncation(9), FitOptions(mode="truncated", R=9, **tight))
    diff = exact.predict_targets(series) - trunc.predict_targets(series)
    assert np.sqrt(np.mean(diff ** 2)) <= 1e-5


def test_fit_is_deterministic(rng, ctx3):
    series = simulate_small(rng, 60, 3, 3, 2)[0]
    r1 = fit(series, 1, 1, ctx3, FitOptions(lam=0.1))[1]
    r2 = fit(series, 1, 1, ctx3, FitOptions(lam=0.1))[1]
    assert r1.objective_trace == r2.objective_trace


def test_warm_start_at_solution_stops_quickly(rng, ctx3):
    series = simulate_small(rng, 100, 3, 3, 2)[0]
    model, report = fit(series, 1, 1, ctx3, FitOptions(lam=0.1))
    assert report.converged
    _, again = fit(series, 1, 1, ctx3, FitOptions(lam=0.1, warm_start=model))
    assert again.iters_run <= 2


def test_divergence_guard(rng, ctx3, monkeypatch):
    series = simulate_small(rng, 60, 3, 3, 1)[0]
    real = est.update_sigma
    calls = {"n": 0}

    def inflating(state, residual=None):
        calls["n"] += 1
        sr, sc = real(state, residual)
        return sr, sc * 10.0 ** calls["n"]

    monkeypatch.setattr(est, "update_sigma", inflating)
    with pytest.raises(ConvergenceError):
        fit(series, 1, 1, ctx3, FitOptions(lam=0.1, max_iters=20))


def test_report_contents(rng, ctx3):
    series = simulate_small(rng, 80, 3, 3, 2)[0]
    _, report = fit(series, 1, 1, ctx3, FitOptions(lam=0.1))
    d = report.to_dict()
    assert d["iters_run"] == len(d["objective_trace"]) == len(report.trace_rows())
    assert set(report.block_gradient_norms) == {"A1", "B1", "coef1"}
    assert 0 < report.df_per_q[0] <= 18


# tune_lambda -----------------------------------------------------------------

def test_tune_lambda_single_value(rng, ctx3):
    series = simulate_small(rng, 90, 3, 3, 1)[0]
    best, scores, _ = tune_lambda(series, 1, 1, ctx3, [0.5], (60, 90))
    assert best == 0.5 and list(scores) == [0.5]


def test_tune_lambda_prefers_shrinkage_under_null(rng, ctx3):
    grid = list(DEFAULT_LAMBDAS)
    hits = 0
    for seed in range(20):
        r = np.random.default_rng(seed)
        series = simulate_small(r, 240, 3, 3, 2, g_scale=0.0)[0]
        best, _, _ = tune_lambda(series, 1, 1, ctx3, grid, (160, 240))
        hits += best == max(grid)
    assert hits >= 14


def test_tune_lambda_signal_curve_not_monotone(rng):
    from marac.simulator import SimConfig, simulate

    sim = simulate(SimConfig(M=4, N=4, T_train=400, T_val=200, T_test=1, seed=5))
    best, scores, _ = tune_lambda(sim.series, 1, 1, sim.ctx, [1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0], sim.split)
    assert best < 10.0
    assert scores[best] < scores[10.0]


# sklearn-style estimator -----------------------------------------------------

def test_marac_estimator_api(rng):
    series = simulate_small(rng, 150, 3, 3, 2)[0]
    m = MARAC(P=1, Q=1, lam=0.05)
    assert m.get_params()["lam"] == 0.05
    c = clone(m).set_params(lam=0.1)
    assert c.lam == 0.1 and m.lam == 0.05
    m.fit(series.X, series.z)
    assert m.converged_ and m.n_iter_ >= 1
    pred = m.predict(series.X, series.z)
    assert pred.shape == series.X.shape and np.isnan(pred[0]).all()
    assert np.isfinite(pred[1:]).all()
    assert m.score(series.X, series.z) < 0


def test_marac_estimator_unfitted_predict(rng):
    with pytest.raises(Exception):
        MARAC().predict(np.zeros((5, 2, 2)))
