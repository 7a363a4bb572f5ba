import json

import numpy as np
import pytest
from numpy.testing import assert_allclose

from marac.estimator import FitOptions, fit
from marac.kernels import SPHERE, GridSpec, KernelContext
from marac.model import MaracModel
from marac.selection import aic, bic, effective_df, information_criteria, select_lags

from conftest import random_spd, simulate_small


def dense_df(model, series):
    """Trace of the kernel ridge hat operator built from the full system matrix."""
    start = model.min_history
    z = series.z[start - 1:series.T - 1]
    C = z.T @ z
    D, K = C.shape[0], model.ctx.gram
    S = K.shape[0]
    Sigma = np.kron(model.sigma_c, model.sigma_r)
    CK = np.kron(C, K)
    system = CK + model.lam * len(z) * np.kron(np.eye(D), Sigma)
    return np.trace(np.linalg.solve(system, CK))


def make_model(rng, lam, ctx, D=2):
    M, N = ctx.grid.M, ctx.grid.N
    return MaracModel(A=[np.eye(M) * 0.5], B=[np.eye(N) * 0.5], sigma_r=random_spd(rng, M),
                      sigma_c=random_spd(rng, N), gamma=[np.zeros((M * N, D))], lam=lam, ctx=ctx)


def test_df_limits(rng, ctx3):
    series = simulate_small(rng, 200, 3, 3, 2)[0]
    _, per_q = effective_df(make_model(rng, 1e-10, ctx3), series)
    assert abs(per_q[0] - 18) <= 0.1
    _, per_q = effective_df(make_model(rng, 1e12, ctx3), series)
    assert per_q[0] <= 1e-6


def test_df_matches_dense_trace(rng, ctx3):
    series = simulate_small(rng, 60, 3, 3, 2)[0]
    for lam in (1e-3, 0.1, 5.0):
        m = make_model(rng, lam, ctx3)
        total, per_q = effective_df(m, series)
        assert_allclose(per_q[0], dense_df(m, series), rtol=1e-8)
        assert_allclose(total, (9 + 9 - 1) + (9 + 9) + per_q[0], rtol=1e-12)


def test_df_non_increasing_in_lambda(rng, ctx3):
    series = simulate_small(rng, 60, 3, 3, 2)[0]
    m = make_model(rng, 1.0, ctx3)
    values = []
    for lam in np.logspace(-8, 8, 17):
        m.lam = lam
        values.append(effective_df(m, series)[1][0])
    assert np.all(np.diff(values) <= 1e-9)
    assert all(0 <= v <= 18 for v in values)


def test_truncated_df_bounded_by_RD(rng):
    ctx = KernelContext.build(GridSpec(SPHERE, 3, 3), R=4)
    series = simulate_small(rng, 80, 3, 3, 2)[0]
    model, _ = fit(series, 1, 1, ctx, FitOptions(lam=1e-9, mode="truncated", R=4))
    _, per_q = effective_df(model, series)
    assert per_q[0] <= 4 * 2 + 1e-9
    assert per_q[0] > 7.5


def test_information_criteria_examples():
    assert information_criteria(-12.5, 0, 100) == (25.0, 25.0)
    a1, b1 = information_criteria(-10.0, 3, 50)
    a2, b2 = information_criteria(-10.0, 4, 50)
    assert a1 < a2 and b1 < b2
    assert_allclose(b1, 20 + 3 * np.log(50))


def test_aic_bic_wrappers(rng, ctx3):
    series = simulate_small(rng, 100, 3, 3, 2)[0]
    model, report = fit(series, 1, 1, ctx3, FitOptions(lam=0.1))
    ll = model.log_likelihood_sum(series)
    assert_allclose(aic(model, series), -2 * ll + 2 * report.df_total, rtol=1e-10)
    assert_allclose(bic(model, series), -2 * ll + np.log(series.T - 1) * report.df_total, rtol=1e-10)


def test_single_cell_grid(rng, ctx3):
    series = simulate_small(rng, 100, 3, 3, 2)[0]
    result = select_lags(series, 1, 1, ctx3, FitOptions(lam=0.1), Pmin=1, Qmin=1)
    assert result.chosen == {"AIC": (1, 1), "BIC": (1, 1)}


def test_qmax_zero_sweeps_mar_only(rng):
    series = simulate_small(rng, 100, 3, 3, 2)[0]
    result = select_lags(series, 2, 0, None, FitOptions(lam=0.0), Pmin=1)
    assert set(result.table) == {(1, 0), (2, 0)}


def test_common_conditioning_and_order_independence(rng, ctx3, tmp_path):
    series = simulate_small(rng, 120, 3, 3, 2)[0]
    opts = FitOptions(lam=0.1)
    full = select_lags(series, 2, 2, ctx3, opts, Pmin=1, Qmin=1)
    sub = select_lags(series, 2, 2, ctx3, opts, Pmin=2, Qmin=1)
    par = select_lags(series, 2, 2, ctx3, opts, Pmin=1, Qmin=1, n_jobs=2)
    for cell, row in sub.table.items():
        assert_allclose(row["BIC"], full.table[cell]["BIC"], rtol=1e-12)
    for cell, row in par.table.items():
        assert_allclose(row["AIC"], full.table[cell]["AIC"], rtol=1e-12)
    full.write_csv(tmp_path / "sel.csv")
    full.write_chosen(tmp_path / "chosen.json")
    lines = (tmp_path / "sel.csv").read_text().splitlines()
    assert lines[0] == "P,Q,df,nll,AIC,BIC" and len(lines) == 5
    assert set(json.loads((tmp_path / "chosen.json").read_text())) == {"AIC", "BIC"}


def test_bic_rejects_auxiliary_lag_under_null(ctx3):
    hits = 0
    for seed in range(20):
        series = simulate_small(np.random.default_rng(seed), 300, 3, 3, 2, g_scale=0.0)[0]
        result = select_lags(series, 1, 1, ctx3, FitOptions(lam=0.1), Pmin=1, Qmin=0)
        hits += result.chosen["BIC"][1] == 0
    assert hits >= 14


def test_empty_grid_rejected(rng):
    from marac.exceptions import ContractError

    with pytest.raises(ContractError):
        select_lags(simulate_small(rng, 50, 2, 2, 1)[0], 1, 1, Pmin=2)
