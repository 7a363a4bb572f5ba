"""Effective degrees of freedom, information criteria and lag selection."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np
from joblib import Parallel, delayed

from .estimator import FitOptions, _whitened_gram, fit
from .exceptions import ContractError, MaracError
from .series import as_series

log = logging.getLogger(__name__)


def _aux_second_moments(model, series, start):
    series = as_series(series)
    start = model.min_history if start is None else start
    n = series.T - start
    off = model.lag_offset
    out = []
    for q in range(1, model.Q + 1):
        lo = start - off - q
        z = series.z[lo:lo + n]
        out.append(z.T @ z / n)
    return out


def effective_df(model, series, start=None):
    """Total effective degrees of freedom and the per-lag auxiliary contributions.

    The auxiliary part uses the trace of the kernel ridge hat operator,
    computed from the eigenvalues of the whitened Gram matrix and of the
    lagged auxiliary second-moment matrix.
    """
    M, N, lam = model.M, model.N, model.lam
    df = model.P * (M * M + N * N - 1) + (M * M + N * N)
    per_q = []
    if model.Q:
        if model.mode == "truncated":
            sigma_inv = np.kron(np.linalg.inv(model.sigma_c), np.linalg.inv(model.sigma_r))
            KR = model.ctx.basis
            root = np.sqrt(model.ctx.eigenvalues)
            H = (KR * root).T @ sigma_inv @ (KR * root)
            kappa = np.clip(np.linalg.eigvalsh(0.5 * (H + H.T)), 0.0, None)
        else:
            kappa = _whitened_gram(model.ctx.gram, model.sigma_r, model.sigma_c)[0]
        for C in _aux_second_moments(model, series, start):
            c = np.clip(np.linalg.eigvalsh(0.5 * (C + C.T)), 0.0, None)
            prod = np.outer(kappa, c)
            per_q.append(float(np.sum(prod / (prod + lam))) if lam > 0 else float(np.count_nonzero(prod > 0)))
    return float(df + sum(per_q)), per_q


def information_criteria(loglik_sum, df, n_frames):
    """``(AIC, BIC)`` from a summed log-likelihood."""
    return -2.0 * loglik_sum + 2.0 * df, -2.0 * loglik_sum + np.log(n_frames) * df


def aic(model, series, start=None, df=None):
    series = as_series(series)
    start = model.min_history if start is None else start
    df = effective_df(model, series, start)[0] if df is None else df
    return information_criteria(model.log_likelihood_sum(series, start), df, series.T - start)[0]


def bic(model, series, start=None, df=None):
    series = as_series(series)
    start = model.min_history if start is None else start
    df = effective_df(model, series, start)[0] if df is None else df
    return information_criteria(model.log_likelihood_sum(series, start), df, series.T - start)[1]


@dataclass
class SelectionResult:
    table: Dict[Tuple[int, int], dict] = field(default_factory=dict)
    chosen: Dict[str, Tuple[int, int]] = field(default_factory=dict)
    errors: Dict[Tuple[int, int], str] = field(default_factory=dict)

    def rows(self):
        for (P, Q), r in sorted(self.table.items()):
            yield {"P": P, "Q": Q, "df": r["df"], "nll": r["nll"], "AIC": r["AIC"], "BIC": r["BIC"]}

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["P", "Q", "df", "nll", "AIC", "BIC"])
            w.writeheader()
            for row in self.rows():
                w.writerow(row)

    def write_chosen(self, path):
        with open(path, "w") as fh:
            json.dump({k: {"P": v[0], "Q": v[1]} for k, v in self.chosen.items()}, fh, indent=2)


def _choose(table, key):
    cells = [(r[key], P + Q, P, (P, Q)) for (P, Q), r in table.items() if np.isfinite(r[key])]
    if not cells:
        return None
    return min(cells)[3]


def _fit_cell(series, P, Q, kernel_ctx, opts, start, lam_grid, split):
    from .estimator import tune_lambda

    try:
        o = FitOptions(**{**opts.__dict__, "start": start, "warm_start": None})
        if lam_grid is not None and split is not None and Q > 0:
            o.lam = tune_lambda(series, P, Q, kernel_ctx, lam_grid, split,
                                FitOptions(**{**o.__dict__, "start": None}))[0]
        model, _ = fit(series, P, Q, kernel_ctx if Q else None, o)
        df, _ = effective_df(model, series, start)
        ll = model.log_likelihood_sum(series, start)
        a, b = information_criteria(ll, df, series.T - start)
        return {"df": df, "nll": -ll, "AIC": a, "BIC": b, "lambda": o.lam}
    except (MaracError, np.linalg.LinAlgError) as exc:
        log.warning("fit failed for P=%d Q=%d: %s", P, Q, exc)
        return str(exc)


def select_lags(series, Pmax, Qmax, kernel_ctx=None, opts=None, Pmin=0, Qmin=0, lam_grid=None, split=None,
                n_jobs=1):
    """Fit every ``(P, Q)`` on the grid and score AIC/BIC on a common horizon.

    All candidates condition on frames ``t >= max(Pmax, Qmax) + horizon - 1``.
    With ``lam_grid`` and ``split`` the penalty is tuned per candidate on the
    validation window, otherwise ``opts.lam`` is shared. Fit failures are
    recorded in ``errors`` and skipped.
    """
    series = as_series(series)
    opts = FitOptions() if opts is None else opts
    start = max(Pmax, Qmax) + opts.horizon - 1
    cells = [(P, Q) for P in range(Pmin, Pmax + 1) for Q in range(Qmin, Qmax + 1)]
    if not cells:
        raise ContractError("empty lag grid")
    outcomes = Parallel(n_jobs=n_jobs)(
        delayed(_fit_cell)(series, P, Q, kernel_ctx, opts, start, lam_grid, split) for P, Q in cells
    )
    result = SelectionResult()
    for cell, out in zip(cells, outcomes):
        if isinstance(out, str):
            result.errors[cell] = out
        else:
            result.table[cell] = out
    for key in ("AIC", "BIC"):
        choice = _choose(result.table, key)
        if choice is not None:
            result.chosen[key] = choice
    return result
