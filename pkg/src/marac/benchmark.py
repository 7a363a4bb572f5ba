"""Head-to-head test-set evaluation of MARAC against the baselines."""

from __future__ import annotations

import csv
import os

import numpy as np

from .baselines import MAR, MARLM, Persistence, PixelAR, VARX
from .estimator import FitOptions, fit, tune_lambda
from .exceptions import ContractError
from .series import as_series, rmse

METHODS = ("marac", "mar", "mar_lm", "pixel_ar", "varx", "persistence")
METRIC_FIELDS = ["method", "h", "split", "RMSE", "RMSE_minus_noise", "lambda"]
DEFAULT_LAMBDAS = (1e-1, 1e-2, 1e-3, 1e-4)


def split_rmse(model, series, begin, end):
    """One-step (or direct h-step) RMSE over target frames ``[begin, end)``."""
    upto = series.slice(0, end)
    pred = model.predict_targets(upto, start=begin)
    return rmse(pred, upto.X[begin:end])


def fit_method(method, series, split, P, Q, ctx, h=1, lam_grid=DEFAULT_LAMBDAS, opts=None):
    """Fit one method on the training window; penalized methods tune lambda on validation.

    Returns ``(forecaster, lambda or None)``; every forecaster has ``predict_targets``.
    """
    series = as_series(series)
    train = series.slice(0, split[0])
    base = FitOptions() if opts is None else opts
    if method == "marac":
        o = FitOptions(**{**base.__dict__, "horizon": h})
        if len(lam_grid) == 1:
            o.lam = float(lam_grid[0])
            return fit(train, P, Q, ctx, o)[0], o.lam
        lam, _, model = tune_lambda(series, P, Q, ctx, lam_grid, split, o)
        return model, lam
    if method == "mar":
        return MAR(P, base.max_iters, base.rel_tol, base.diag_sigma, horizon=h).fit(train), None
    if method == "mar_lm":
        mar = MAR(P, base.max_iters, base.rel_tol, base.diag_sigma, horizon=h).fit(train)
        best = None
        for lam in sorted(lam_grid, reverse=True):
            est = MARLM(P, Q, lam, ctx, base.max_iters, base.rel_tol, horizon=h).fit(train, mar=mar)
            score = split_rmse(est, series, max(split[0], est.min_history), split[1])
            if best is None or score < best[0]:
                best = (score, lam, est)
        return best[2], best[1]
    if method == "pixel_ar":
        return PixelAR(P, Q, horizon=h).fit(train), None
    if method == "varx":
        return VARX(P, Q, horizon=h).fit(train), None
    if method == "persistence":
        return Persistence(horizon=h), None
    raise ContractError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")


def run_benchmark(series, split, methods, horizons=(1,), P=1, Q=1, ctx=None, lam_grid=DEFAULT_LAMBDAS,
                  noise_level=None, opts=None):
    """Validation and test RMSE rows for every method and latency."""
    if not methods:
        raise ContractError("no methods requested")
    for m in methods:
        if m not in METHODS:
            raise ContractError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
    series = as_series(series)
    rows = []
    for h in horizons:
        for method in methods:
            model, lam = fit_method(method, series, split, P, Q, ctx, h, lam_grid, opts)
            first = max(split[0], model.min_history)
            for name, (b, e) in (("val", (first, split[1])), ("test", (split[1], series.T))):
                if e <= b:
                    continue
                r = split_rmse(model, series, b, e)
                rows.append({
                    "method": method,
                    "h": h,
                    "split": name,
                    "RMSE": r,
                    "RMSE_minus_noise": "" if noise_level is None else r - noise_level,
                    "lambda": "" if lam is None else lam,
                })
    return rows


def append_metrics(rows, path):
    """Append rows to ``metrics.csv``, writing the fixed header only for a new file."""
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        if new:
            w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in METRIC_FIELDS})


def noise_level_from_truth(sigma_r, sigma_c):
    """Root mean noise variance per entry, the RMSE an oracle forecaster attains."""
    return float(np.sqrt(np.mean(np.outer(np.diag(sigma_c), np.diag(sigma_r)))))
