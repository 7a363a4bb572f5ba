"""Competing forecasters: MAR, two-step MAR+LM, pixel-wise AR, VARX and persistence.

Every forecaster exposes ``fit(X, Z)``, ``predict(X, Z)`` (aligned with the
input, NaN where history is missing), ``predict_targets(series, start)`` and
``forecast_latency(series, t, h)``.
"""

from __future__ import annotations

import logging
import warnings

import numpy as np
from sklearn.base import BaseEstimator

from . import serialization as ser
from .estimator import FitOptions, _vec_frames, fit, solve_krr_system
from .exceptions import ContractError, FormatError, InsufficientDataError
from .model import MaracModel, aux_term
from .series import as_series, rmse

log = logging.getLogger(__name__)


class _Forecaster(BaseEstimator):
    kind = "base"

    @property
    def min_history(self):
        return max(self.P, getattr(self, "Q", 0)) + self.horizon - 1

    def predict(self, X, Z=None):
        series = as_series(X, Z)
        out = np.full(series.X.shape, np.nan)
        if self.min_history < series.T:
            out[self.min_history:] = self.predict_targets(series)
        return out

    def predict_one(self, history_X, history_z=None):
        """Forecast the frame ``horizon`` steps after the last one in ``history_X``."""
        series = as_series(np.asarray(history_X, dtype=float), history_z)
        return self.forecast_latency(series, series.T)

    def forecast_latency(self, series, t, h=None):
        if h is not None and h != self.horizon:
            raise ContractError(f"fitted for horizon {self.horizon}, not {h}")
        series = as_series(series)
        if t < self.min_history - self.horizon + 1 or t > series.T:
            raise InsufficientDataError(f"not enough history before t={t}")
        sub = series.slice(0, t)
        pad = MatrixPad.extend(sub, self.horizon)
        return self.predict_targets(pad, start=pad.T - 1)[0]

    def score(self, X, Z=None):
        series = as_series(X, Z)
        pred = self.predict_targets(series)
        return -rmse(pred, series.X[series.T - pred.shape[0]:])


class MatrixPad:
    """Append placeholder frames so a direct forecast target index exists."""

    @staticmethod
    def extend(series, h):
        from .series import MatrixSeries

        X = np.concatenate([series.X, np.zeros((h,) + series.X.shape[1:])])
        z = np.concatenate([series.z, np.zeros((h, series.D))])
        return MatrixSeries(X, z)


class MAR(_Forecaster):
    """Bilinear matrix autoregression without auxiliary covariates."""

    kind = "mar"

    def __init__(self, P=1, max_iter=200, tol=1e-4, diag_sigma=False, horizon=1):
        self.P = P
        self.max_iter = max_iter
        self.tol = tol
        self.diag_sigma = diag_sigma
        self.horizon = horizon

    def fit(self, X, Z=None, start=None):
        series = as_series(X, Z)
        opts = FitOptions(lam=0.0, max_iters=self.max_iter, rel_tol=self.tol, diag_sigma=self.diag_sigma,
                          horizon=self.horizon, start=start)
        self.model_, self.report_ = fit(series, self.P, 0, None, opts)
        return self

    def predict_targets(self, series, start=None):
        return self.model_.predict_targets(series, start=start)

    def to_dict(self):
        return {"kind": self.kind, "params": self.get_params(), "model": self.model_.to_dict()}

    def _load(self, d):
        self.model_ = MaracModel.from_dict(d["model"])


def fit_mar(series, P, opts=None):
    """MAR(P) through the MARAC estimator with no auxiliary lags."""
    opts = FitOptions(lam=0.0) if opts is None else opts
    return fit(series, P, 0, None, opts)


class MARLM(_Forecaster):
    """Two-step fit: MAR first, then kernel ridge regression of its residuals on lagged covariates.

    The second step treats the noise as isotropic with variance estimated from
    the MAR residuals.
    """

    kind = "mar_lm"

    def __init__(self, P=1, Q=1, lam=1.0, kernel=None, max_iter=200, tol=1e-4, horizon=1):
        self.P = P
        self.Q = Q
        self.lam = lam
        self.kernel = kernel
        self.max_iter = max_iter
        self.tol = tol
        self.horizon = horizon

    def fit(self, X, Z=None, mar=None):
        series = as_series(X, Z)
        from .estimator import default_context
        from .kernels import KernelContext

        ctx = self.kernel if isinstance(self.kernel, KernelContext) else default_context(series.M, series.N, self.kernel)
        start = self.min_history
        if mar is None:
            mar = MAR(self.P, self.max_iter, self.tol, horizon=self.horizon).fit(series, start=start)
        self.mar_ = mar
        base = mar.model_
        R = series.X[start:] - base.predict_targets(series, start=start)
        sigma2 = float(np.mean(R * R))
        n = R.shape[0]
        off = self.horizon - 1
        zlags = [series.z[start - off - q:start - off - q + n] for q in range(1, self.Q + 1)]
        gamma = [np.zeros((series.M * series.N, series.D)) for _ in range(self.Q)]
        sr, sc = np.eye(series.M), np.eye(series.N)
        K = ctx.gram
        # block coordinate sweeps over lags; a single pass is exact when Q == 1
        for _ in range(1 if self.Q <= 1 else 50):
            old = [g.copy() for g in gamma]
            for q in range(self.Q):
                part = R.copy()
                for q2 in range(self.Q):
                    if q2 != q:
                        G = (K @ gamma[q2]).reshape(series.M, series.N, -1, order="F")
                        part -= aux_term(G, zlags[q2])
                rhs = _vec_frames(part).T @ zlags[q]
                gamma[q] = solve_krr_system(zlags[q].T @ zlags[q], K, sr, sc, self.lam * n * sigma2, rhs)
            if max((np.linalg.norm(g - o) / (1 + np.linalg.norm(g)) for g, o in zip(gamma, old)), default=0) < self.tol:
                break
        self.model_ = MaracModel(A=base.A, B=base.B, sigma_r=sigma2 * sr, sigma_c=sc, gamma=gamma or None,
                                 lam=self.lam, ctx=ctx, horizon=self.horizon, D=series.D)
        self.sigma2_ = sigma2
        return self

    def predict_targets(self, series, start=None):
        return self.model_.predict_targets(series, start=start)

    def to_dict(self):
        params = {k: v for k, v in self.get_params().items() if k != "kernel"}
        return {"kind": self.kind, "params": params, "model": self.model_.to_dict()}

    def _load(self, d):
        self.model_ = MaracModel.from_dict(d["model"])


def fit_mar_lm(series, P, Q, kernel_ctx, lam=1.0, horizon=1):
    return MARLM(P, Q, lam, kernel_ctx, horizon=horizon).fit(series)


def _ridge_solve(XtX, XtY, ridge):
    k = XtX.shape[-1]
    return np.linalg.solve(XtX + ridge * np.eye(k), XtY)


class PixelAR(_Forecaster):
    """Independent per-pixel least squares with intercept, own lags and covariate lags."""

    kind = "pixel_ar"

    def __init__(self, P=1, Q=1, horizon=1):
        self.P = P
        self.Q = Q
        self.horizon = horizon

    def _design(self, series, start):
        n = series.T - start
        off = self.horizon - 1
        T, M, N = series.X.shape
        S = M * N
        cols = [np.ones((S, n, 1))]
        flat = series.X.reshape(T, S)
        for p in range(1, self.P + 1):
            lo = start - off - p
            cols.append(flat[lo:lo + n].T[:, :, None])
        for q in range(1, self.Q + 1):
            lo = start - off - q
            cols.append(np.broadcast_to(series.z[lo:lo + n], (S, n, series.D)))
        return np.concatenate(cols, axis=2)

    def fit(self, X, Z=None):
        series = as_series(X, Z)
        start = self.min_history
        if series.T - start <= 1 + self.P + self.Q * series.D:
            raise InsufficientDataError("too few frames for per-pixel least squares")
        Xd = self._design(series, start)
        y = series.X[start:].reshape(series.T - start, -1).T
        XtX = np.einsum("snk,snl->skl", Xd, Xd)
        Xty = np.einsum("snk,sn->sk", Xd, y)
        ranks = np.linalg.matrix_rank(XtX, hermitian=True)
        self.ridge_fallback_ = ranks < XtX.shape[-1]
        coef = np.empty(Xty.shape)
        ok = ~self.ridge_fallback_
        if ok.any():
            coef[ok] = np.linalg.solve(XtX[ok], Xty[ok][..., None])[..., 0]
        if self.ridge_fallback_.any():
            log.warning("rank-deficient design for %d pixels; using ridge 1e-8", int(self.ridge_fallback_.sum()))
            coef[~ok] = _ridge_solve(XtX[~ok], Xty[~ok][..., None], 1e-8)[..., 0]
        self.coef_ = coef
        resid = y - np.einsum("snk,sk->sn", Xd, coef)
        self.sigma2_ = (resid ** 2).mean(axis=1).reshape(series.M, series.N)
        self.shape_ = (series.M, series.N)
        return self

    @property
    def intercept_(self):
        return self.coef_[:, 0].reshape(self.shape_)

    def predict_targets(self, series, start=None):
        series = as_series(series)
        start = self.min_history if start is None else start
        Xd = self._design(series, start)
        pred = np.einsum("snk,sk->sn", Xd, self.coef_)
        return pred.T.reshape(series.T - start, *self.shape_)

    def to_dict(self):
        return {"kind": self.kind, "params": self.get_params(), "coef": ser.encode_array(self.coef_),
                "shape": list(self.shape_)}

    def _load(self, d):
        self.coef_ = ser.decode_array(d["coef"])
        self.shape_ = tuple(d["shape"])


class VARX(_Forecaster):
    """Least squares VAR on vectorized frames with lagged covariates as exogenous inputs."""

    kind = "varx"

    def __init__(self, P=1, Q=1, ridge=1e-8, horizon=1):
        self.P = P
        self.Q = Q
        self.ridge = ridge
        self.horizon = horizon

    def _design(self, series, start):
        n = series.T - start
        off = self.horizon - 1
        flat = _vec_frames(series.X)
        cols = []
        for p in range(1, self.P + 1):
            lo = start - off - p
            cols.append(flat[lo:lo + n])
        for q in range(1, self.Q + 1):
            lo = start - off - q
            cols.append(series.z[lo:lo + n])
        return np.concatenate(cols, axis=1) if cols else np.zeros((n, 0))

    def fit(self, X, Z=None):
        series = as_series(X, Z)
        start = self.min_history
        n = series.T - start
        k = series.M * series.N * self.P + series.D * self.Q
        if k > n:
            raise InsufficientDataError(
                f"VARX has {k} predictors per equation but only {n} frames; use MARAC for grids this large"
            )
        if k >= 0.5 * n:
            warnings.warn(f"VARX uses {k} predictors for {n} frames; estimates will be noisy", stacklevel=2)
        Xd = self._design(series, start)
        Y = _vec_frames(series.X[start:])
        XtX = Xd.T @ Xd
        self.coef_ = _ridge_solve(XtX, Xd.T @ Y, self.ridge).T
        self.shape_ = (series.M, series.N)
        return self

    def predict_targets(self, series, start=None):
        series = as_series(series)
        start = self.min_history if start is None else start
        pred = self._design(series, start) @ self.coef_.T
        M, N = self.shape_
        return pred.reshape(-1, N, M).transpose(0, 2, 1)

    def to_dict(self):
        return {"kind": self.kind, "params": self.get_params(), "coef": ser.encode_array(self.coef_),
                "shape": list(self.shape_)}

    def _load(self, d):
        self.coef_ = ser.decode_array(d["coef"])
        self.shape_ = tuple(d["shape"])


class Persistence(_Forecaster):
    """Repeat the most recent observed frame at every latency."""

    kind = "persistence"

    def __init__(self, horizon=1):
        self.horizon = horizon

    P = 1

    def fit(self, X=None, Z=None):
        return self

    def predict_targets(self, series, start=None):
        series = as_series(series)
        start = self.min_history if start is None else start
        return series.X[start - self.horizon:series.T - self.horizon]

    def to_dict(self):
        return {"kind": self.kind, "params": self.get_params()}

    def _load(self, d):
        pass


def persistence(series, t, h=1):
    """The frame before ``t``, whatever the latency."""
    series = as_series(series)
    if t < 1 or t > series.T:
        raise InsufficientDataError("persistence needs at least one past frame")
    return series.X[t - 1].copy()


BASELINES = {cls.kind: cls for cls in (MAR, MARLM, PixelAR, VARX, Persistence)}


def baseline_from_dict(d):
    kind = d.get("kind")
    if kind not in BASELINES:
        raise FormatError(f"unknown baseline kind {kind!r}")
    obj = BASELINES[kind](**d.get("params", {}))
    obj._load(d)
    return obj
