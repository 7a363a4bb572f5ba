"""Penalized maximum likelihood for MARAC(P, Q) by alternating exact block minimization.

Blocks are visited in the order A_1, B_1, ..., A_P, B_P, Gamma_1 .. Gamma_Q,
Sigma_r, Sigma_c. Each update is the exact minimizer of the penalized
objective over its block, so the objective never increases.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np
from scipy import linalg as sla
from sklearn.base import BaseEstimator

from .exceptions import ContractError, ConvergenceError, InsufficientDataError, SingularityError
from .kernels import SPHERE, GridSpec, KernelContext
from .linalg import kron_diff_bound, spd_cholesky, spd_solve
from .model import MaracModel, ar_term, aux_term, logdet_kron, quad_form
from .series import as_series, rmse

DENSE_SYSTEM_LIMIT = 4000


@dataclass
class FitOptions:
    lam: float = 1.0
    max_iters: int = 200
    rel_tol: float = 1e-4
    mode: str = "exact"
    R: Optional[int] = None
    diag_sigma: bool = False
    warm_start: Optional[MaracModel] = None
    seed: int = 0
    horizon: int = 1
    start: Optional[int] = None
    record_blocks: bool = False

    def __post_init__(self):
        if self.rel_tol <= 0:
            raise ContractError("rel_tol must be positive")
        if self.lam < 0:
            raise ContractError("lambda must be non-negative")
        if self.mode not in ("exact", "truncated"):
            raise ContractError(f"unknown mode {self.mode!r}")
        if self.horizon < 1:
            raise ContractError("horizon must be >= 1")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        mode = d.get("mode", "exact")
        if isinstance(mode, str) and mode.startswith("truncated:"):
            d["mode"], d["R"] = "truncated", int(mode.split(":", 1)[1])
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f for f in cls.__dataclass_fields__ if f != "warm_start"}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class FitReport:
    objective_trace: List[float] = field(default_factory=list)
    max_block_change: List[float] = field(default_factory=list)
    iters_run: int = 0
    converged: bool = False
    block_gradient_norms: dict = field(default_factory=dict)
    df_total: float = float("nan")
    df_per_q: List[float] = field(default_factory=list)
    elapsed: float = 0.0
    block_objectives: List[float] = field(default_factory=list)

    def to_dict(self):
        d = asdict(self)
        d.pop("block_objectives")
        return d

    def trace_rows(self):
        return [(i, obj, chg) for i, (obj, chg) in enumerate(zip(self.objective_trace, self.max_block_change))]


class FitState:
    """Working state of one fit: lagged design views plus current coefficient blocks."""

    def __init__(self, series, P, Q, ctx, opts, init=None):
        self.series = series = as_series(series)
        self.P, self.Q, self.ctx, self.opts = P, Q, ctx, opts
        self.lam = float(opts.lam)
        self.truncated = opts.mode == "truncated"
        self.M, self.N, self.D = series.M, series.N, series.D
        self.S = self.M * self.N
        off = opts.horizon - 1
        min_start = max(P, Q) + off
        self.start = min_start if opts.start is None else opts.start
        if self.start < min_start:
            raise ContractError(f"conditioning start {self.start} precedes available history {min_start}")
        self.Tp = series.T - self.start
        if P + Q > 0 and self.Tp < 2:
            raise InsufficientDataError(
                f"need at least {min_start + 2} frames for P={P}, Q={Q}, horizon={opts.horizon}; got {series.T}"
            )
        if self.Tp < 1:
            raise InsufficientDataError("no frames to condition on")
        if Q > 0:
            if self.D < 1:
                raise ContractError("Q > 0 needs an auxiliary series")
            if ctx is None:
                raise ContractError("Q > 0 needs a kernel context")
            if (ctx.grid.M, ctx.grid.N) != (self.M, self.N):
                raise ContractError("kernel grid does not match frame shape")
            if self.truncated and ctx.basis is None:
                if opts.R is None:
                    raise ContractError("truncated mode needs R")
                self.ctx = ctx = ctx.with_truncation(opts.R)
            if not self.truncated and self.lam <= 0:
                raise ContractError("exact mode needs lambda > 0 when Q > 0")
        n, s = self.Tp, self.start
        self.Y = series.X[s:]
        self.Xlag = [series.X[s - off - p: s - off - p + n] for p in range(1, P + 1)]
        self.Zlag = [series.z[s - off - q: s - off - q + n] for q in range(1, Q + 1)]
        self.ZZ = [z.T @ z for z in self.Zlag]

        if init is None:
            self.A = [np.eye(self.M) / np.sqrt(self.M) for _ in range(P)]
            self.B = [(0.5 / P) * np.eye(self.N) for _ in range(P)]
            width = ctx.R if (Q and self.truncated) else self.S
            self.coef = [np.zeros((width, self.D)) for _ in range(Q)]
            self.sigma_r, self.sigma_c = np.eye(self.M), np.eye(self.N)
        else:
            if init.P != P or init.Q != Q:
                raise ContractError("warm start model has different lags")
            self.A = [a.copy() for a in init.A]
            self.B = [b.copy() for b in init.B]
            self.coef = [c.copy() for c in init.aux_coefs]
            self.sigma_r, self.sigma_c = init.sigma_r.copy(), init.sigma_c.copy()
        self.ar = [ar_term(self.A[p], self.B[p], self.Xlag[p]) for p in range(P)]
        self.G = [self._tensor(c) for c in self.coef]
        self.aux = [aux_term(self.G[q], self.Zlag[q]) for q in range(Q)]
        self._refresh_inverses()

    # helpers --------------------------------------------------------------

    def _tensor(self, c):
        basis = self.ctx.basis if self.truncated else self.ctx.gram
        return (basis @ c).reshape(self.M, self.N, -1, order="F")

    def _refresh_inverses(self):
        self.sr_inv = np.linalg.inv(self.sigma_r)
        self.sc_inv = np.linalg.inv(self.sigma_c)
        self.sr_inv = 0.5 * (self.sr_inv + self.sr_inv.T)
        self.sc_inv = 0.5 * (self.sc_inv + self.sc_inv.T)

    def residual(self):
        R = self.Y.copy()
        for term in self.ar:
            R -= term
        for term in self.aux:
            R -= term
        return R

    def objective(self):
        R = self.residual()
        nll = 0.5 * logdet_kron(self.sigma_r, self.sigma_c) + 0.5 * quad_form(R, self.sr_inv, self.sc_inv) / self.Tp
        pen = 0.0
        for c in self.coef:
            if self.truncated:
                pen += float(np.sum(c * c / self.ctx.eigenvalues[:, None]))
            else:
                pen += float(np.sum(c * (self.ctx.gram @ c)))
        return nll + 0.5 * self.lam * pen

    def to_model(self, normalize=True):
        A, B = [a.copy() for a in self.A], [b.copy() for b in self.B]
        if normalize:
            A, B = _normalize_pairs(A, B)
        coef = [c.copy() for c in self.coef]
        return MaracModel(
            A=A,
            B=B,
            sigma_r=self.sigma_r.copy(),
            sigma_c=self.sigma_c.copy(),
            gamma=None if self.truncated or not self.Q else coef,
            theta=coef if (self.truncated and self.Q) else None,
            lam=self.lam,
            ctx=self.ctx,
            diag_sigma=self.opts.diag_sigma,
            horizon=self.opts.horizon,
            D=self.D,
        )

    # block updates --------------------------------------------------------

    def set_A(self, p, A):
        self.A[p] = A
        self.ar[p] = ar_term(A, self.B[p], self.Xlag[p])

    def set_B(self, p, B):
        self.B[p] = B
        self.ar[p] = ar_term(self.A[p], B, self.Xlag[p])

    def set_coef(self, q, c):
        self.coef[q] = c
        self.G[q] = self._tensor(c)
        self.aux[q] = aux_term(self.G[q], self.Zlag[q])

    def set_sigma(self, sigma_r, sigma_c):
        self.sigma_r, self.sigma_c = sigma_r, sigma_c
        self._refresh_inverses()


def _normalize_pairs(A, B):
    outA, outB = [], []
    for a, b in zip(A, B):
        a, b = enforce_identifiability(a, b)
        outA.append(a)
        outB.append(b)
    return outA, outB


def enforce_identifiability(A, B):
    """Rescale a pair so that ``||A||_F = 1`` and ``trace(A) >= 0``; ``kron(B, A)`` is unchanged."""
    norm = np.linalg.norm(A)
    if norm == 0:
        raise ContractError("cannot normalize a zero autoregressive coefficient")
    c = norm * (-1.0 if np.trace(A) < 0 else 1.0)
    return A / c, B * c


def update_A(p, state):
    """Exact minimizer over ``A_p`` (0-based ``p``) with everything else fixed."""
    Xt = state.residual() + state.ar[p]
    W = state.Xlag[p] @ state.B[p].T
    WS = W @ state.sc_inv
    num = np.tensordot(Xt, WS, axes=([0, 2], [0, 2]))
    den = np.tensordot(W, WS, axes=([0, 2], [0, 2]))
    den = 0.5 * (den + den.T)
    return spd_solve(den, num.T).T


def update_B(p, state):
    """Exact minimizer over ``B_p`` (0-based ``p``) with everything else fixed."""
    Xt = state.residual() + state.ar[p]
    V = state.A[p] @ state.Xlag[p]
    SV = state.sr_inv @ V
    num = np.tensordot(Xt, SV, axes=([0, 1], [0, 1]))
    den = np.tensordot(V, SV, axes=([0, 1], [0, 1]))
    den = 0.5 * (den + den.T)
    return spd_solve(den, num.T).T


def _vec_frames(X):
    """``(T, M, N)`` frames to ``(T, M*N)`` rows of column-stacked vectors."""
    T, M, N = X.shape
    return X.transpose(0, 2, 1).reshape(T, M * N)


def _whitened_gram(K, sigma_r, sigma_c):
    """Eigendecomposition of ``L^-1 K L^-T`` for ``L = chol(Sc (x) Sr)``; returns ``(kappa, U, L)``."""
    Lr, _ = spd_cholesky(sigma_r)
    Lc, _ = spd_cholesky(sigma_c)
    L = np.kron(Lc, Lr)
    Kt = sla.solve_triangular(L, sla.solve_triangular(L, K, lower=True).T, lower=True)
    kappa, U = np.linalg.eigh(0.5 * (Kt + Kt.T))
    return np.clip(kappa, 0.0, None), U, L


def solve_krr_system(C, K, sigma_r, sigma_c, ridge, rhs):
    """Solve ``(C (x) K + ridge * I_D (x) Sigma) vec(G) = vec(rhs)`` for ``G`` (S, D)."""
    S, D = rhs.shape
    if S * D <= DENSE_SYSTEM_LIMIT:
        sigma = np.kron(sigma_c, sigma_r)
        big = np.kron(C, K) + ridge * np.kron(np.eye(D), sigma)
        big = 0.5 * (big + big.T)
        return spd_solve(big, rhs.reshape(-1, order="F")).reshape(S, D, order="F")
    kappa, U, L = _whitened_gram(K, sigma_r, sigma_c)
    c, V = np.linalg.eigh(0.5 * (C + C.T))
    c = np.clip(c, 0.0, None)
    denom = np.outer(kappa, c) + ridge
    if np.any(denom <= 0):
        raise SingularityError("kernel ridge system is singular")
    Bt = sla.solve_triangular(L, rhs, lower=True)
    Y = U @ ((U.T @ Bt @ V) / denom) @ V.T
    return sla.solve_triangular(L.T, Y, lower=False)


def update_gamma(q, state):
    """Kernel ridge update of the representer coefficients ``Gamma_q`` (0-based ``q``), ``(S, D)``."""
    Xt = state.residual() + state.aux[q]
    Z = state.Zlag[q]
    rhs = _vec_frames(Xt).T @ Z
    return solve_krr_system(
        state.ZZ[q], state.ctx.gram, state.sigma_r, state.sigma_c, state.lam * state.Tp, rhs
    )


def update_theta(q, state):
    """Ridge update of the truncated-basis coefficients ``Theta_q`` (0-based ``q``), ``(R, D)``.

    With ``Theta = Lambda^(1/2) Y`` the system becomes
    ``(C (x) Lambda^(1/2) H Lambda^(1/2) + ridge I) vec(Y) = vec(Lambda^(1/2) rhs)`` and is
    diagonalized by the eigenvectors of its two factors, so no ``RD x RD`` matrix is formed.
    """
    Xt = state.residual() + state.aux[q]
    Z = state.Zlag[q]
    KR = state.ctx.basis
    root = np.sqrt(state.ctx.eigenvalues)
    Lr, _ = spd_cholesky(state.sigma_r)
    Lc, _ = spd_cholesky(state.sigma_c)
    W = sla.solve_triangular(np.kron(Lc, Lr), KR * root, lower=True)
    Ht = W.T @ W
    kappa, U = np.linalg.eigh(0.5 * (Ht + Ht.T))
    c, V = np.linalg.eigh(0.5 * (state.ZZ[q] + state.ZZ[q].T))
    denom = np.outer(np.clip(kappa, 0.0, None), np.clip(c, 0.0, None)) + state.lam * state.Tp
    if np.any(denom <= 0):
        raise SingularityError("truncated ridge system is singular; lambda must be positive")
    rhs = root[:, None] * (KR.T @ spd_solve(np.kron(state.sigma_c, state.sigma_r), _vec_frames(Xt).T @ Z))
    Y = U @ ((U.T @ rhs @ V) / denom) @ V.T
    return root[:, None] * Y


def _floor_spd(S):
    S = 0.5 * (S + S.T)
    mean_diag = np.mean(np.diag(S))
    floor = 1e-10 * mean_diag if mean_diag > 0 else 1e-10
    w, U = np.linalg.eigh(S)
    if w[0] < floor:
        S = (U * np.clip(w, floor, None)) @ U.T
        S = 0.5 * (S + S.T)
    return S


def update_sigma(state, residual=None):
    """Row then column covariance updates; returns ``(sigma_r, sigma_c)`` with ``trace(sigma_r) = M``."""
    R = state.residual() if residual is None else residual
    Tp, M, N = R.shape
    diag = state.opts.diag_sigma
    sr = np.tensordot(R @ state.sc_inv, R, axes=([0, 2], [0, 2])) / (N * Tp)
    if diag:
        sr = np.diag(np.diag(sr))
    sr = _floor_spd(sr)
    sr_inv = np.linalg.inv(sr)
    sc = np.tensordot(R, sr_inv @ R, axes=([0, 1], [0, 1])) / (M * Tp)
    if diag:
        sc = np.diag(np.diag(sc))
    sc = _floor_spd(sc)
    c = np.trace(sr) / M
    return sr / c, sc * c


def _converged(old, state, tol):
    changes = []
    ok = True
    for p in range(state.P):
        bound = kron_diff_bound(state.A[p], old["A"][p], state.B[p], old["B"][p])
        scale = 1.0 + np.linalg.norm(state.A[p]) * np.linalg.norm(state.B[p])
        changes.append(bound / scale)
        ok &= bound < tol * scale
    for q in range(state.Q):
        diff = np.linalg.norm(state.G[q] - old["G"][q])
        scale = 1.0 + np.linalg.norm(state.G[q])
        changes.append(diff / scale)
        ok &= diff < tol * scale
    bound = kron_diff_bound(state.sigma_r, old["sr"], state.sigma_c, old["sc"])
    scale = 1.0 + np.linalg.norm(state.sigma_r) * np.linalg.norm(state.sigma_c)
    changes.append(bound / scale)
    ok &= bound < tol * scale
    return bool(ok), float(max(changes))


def run_iteration(state, record=None):
    """One full sweep over all blocks, in place."""
    def mark():
        if record is not None:
            record.append(state.objective())

    for p in range(state.P):
        state.set_A(p, update_A(p, state))
        mark()
        state.set_B(p, update_B(p, state))
        mark()
    for q in range(state.Q):
        upd = update_theta if state.truncated else update_gamma
        state.set_coef(q, upd(q, state))
        mark()
    state.set_sigma(*update_sigma(state))
    mark()


def fit(series, P, Q, kernel_ctx=None, opts=None):
    """Fit MARAC(P, Q); returns ``(MaracModel, FitReport)``."""
    opts = FitOptions() if opts is None else opts
    series = as_series(series)
    if P < 0 or Q < 0:
        raise ContractError("lags must be non-negative")
    if series.T < max(P, Q) + opts.horizon + 1:
        raise InsufficientDataError(f"{series.T} frames are too few for P={P}, Q={Q}")
    t0 = time.perf_counter()
    state = FitState(series, P, Q, kernel_ctx, opts, init=opts.warm_start)
    report = FitReport()
    record = report.block_objectives if opts.record_blocks else None
    prev = state.objective()
    if record is not None:
        record.append(prev)
    increases = 0
    for it in range(opts.max_iters):
        old = {
            "A": [a.copy() for a in state.A],
            "B": [b.copy() for b in state.B],
            "G": [g.copy() for g in state.G],
            "sr": state.sigma_r.copy(),
            "sc": state.sigma_c.copy(),
        }
        run_iteration(state, record)
        obj = state.objective()
        ok, change = _converged(old, state, opts.rel_tol)
        report.objective_trace.append(obj)
        report.max_block_change.append(change)
        report.iters_run = it + 1
        if obj > prev + 1e-6 * (1.0 + abs(prev)):
            increases += 1
            if increases >= 2:
                raise ConvergenceError(f"objective increased on consecutive iterations ({prev} -> {obj})")
        else:
            increases = 0
        prev = obj
        if ok:
            report.converged = True
            break
    model = state.to_model(normalize=True)
    from .selection import effective_df

    if Q == 0 or opts.lam > 0 or state.truncated:
        report.df_total, report.df_per_q = effective_df(model, series, start=state.start)
    report.block_gradient_norms = block_gradient_norms(state)
    report.elapsed = time.perf_counter() - t0
    return model, report


def block_gradient_norms(state):
    """Analytic gradient norms of the penalized objective for each block at the current state."""
    R = state.residual()
    Tp = state.Tp
    out = {}
    SRS = state.sr_inv @ R @ state.sc_inv
    for p in range(state.P):
        gA = -np.tensordot(SRS, state.Xlag[p] @ state.B[p].T, axes=([0, 2], [0, 2])) / Tp
        gB = -np.tensordot(SRS, state.A[p] @ state.Xlag[p], axes=([0, 1], [0, 1])) / Tp
        out[f"A{p + 1}"] = float(np.linalg.norm(gA))
        out[f"B{p + 1}"] = float(np.linalg.norm(gB))
    for q in range(state.Q):
        basis = state.ctx.basis if state.truncated else state.ctx.gram
        g = -basis.T @ (_vec_frames(SRS).T @ state.Zlag[q]) / Tp
        if state.truncated:
            g += state.lam * state.coef[q] / state.ctx.eigenvalues[:, None]
        else:
            g += state.lam * state.ctx.gram @ state.coef[q]
        out[f"coef{q + 1}"] = float(np.linalg.norm(g))
    return out


def tune_lambda(series, P, Q, kernel_ctx, lam_grid, split, opts=None):
    """Choose lambda by one-step validation RMSE.

    ``split = (train_end, val_end)``: fit on frames ``[0, train_end)`` and score
    predictions of frames ``[train_end, val_end)``. Candidates are fitted from the
    largest lambda down, each warm-started from the previous solution; ties go to
    the larger lambda. Returns ``(best_lambda, {lambda: rmse}, best_model)``.
    """
    series = as_series(series)
    lam_grid = sorted({float(x) for x in lam_grid}, reverse=True)
    if not lam_grid:
        raise ContractError("empty lambda grid")
    train_end, val_end = split
    if val_end <= train_end:
        raise ContractError("empty validation window")
    base = FitOptions() if opts is None else opts
    train = series.slice(0, train_end)
    upto = series.slice(0, val_end)
    scores, models = {}, {}
    warm = None
    for lam in lam_grid:
        o = FitOptions(**{**base.__dict__, "lam": lam, "warm_start": warm})
        model, _ = fit(train, P, Q, kernel_ctx, o)
        pred = model.predict_targets(upto, start=max(train_end, model.min_history))
        scores[lam] = rmse(pred, upto.X[upto.T - pred.shape[0]:])
        models[lam] = model
        warm = model
    best = min(lam_grid, key=lambda lam: (scores[lam], -lam))
    return best, scores, models[best]


def default_context(M, N, kernel=None, R=None):
    return KernelContext.build(GridSpec(SPHERE, M, N), kernel, R)


class MARAC(BaseEstimator):
    """Matrix autoregression with auxiliary vector covariates.

    Parameters
    ----------
    P, Q : int
        Number of matrix lags and auxiliary-vector lags.
    lam : float
        Weight of the squared RKHS norm penalty on the auxiliary coefficients.
    kernel : KernelContext, kernel object or None
        Spatial kernel over the grid. ``None`` uses the Lebedev kernel on a
        sphere grid matching the frame shape.
    mode : {"exact", "truncated"}
        ``"truncated"`` estimates coefficients of the leading ``R`` Mercer
        eigenfunctions instead of all representers.
    horizon : int
        Forecast latency ``h``; the fitted model maps frames before ``t`` to
        the frame at ``t + h - 1``.

    Attributes
    ----------
    model_ : MaracModel
    report_ : FitReport
    """

    def __init__(self, P=1, Q=1, lam=1.0, kernel=None, mode="exact", R=None, max_iter=200,
                 tol=1e-4, diag_sigma=False, horizon=1, warm_start=False):
        self.P = P
        self.Q = Q
        self.lam = lam
        self.kernel = kernel
        self.mode = mode
        self.R = R
        self.max_iter = max_iter
        self.tol = tol
        self.diag_sigma = diag_sigma
        self.horizon = horizon
        self.warm_start = warm_start

    def _context(self, M, N):
        if isinstance(self.kernel, KernelContext):
            return self.kernel
        return default_context(M, N, self.kernel, self.R if self.mode == "truncated" else None)

    def _options(self):
        warm = getattr(self, "model_", None) if self.warm_start else None
        return FitOptions(lam=self.lam, max_iters=self.max_iter, rel_tol=self.tol, mode=self.mode, R=self.R,
                          diag_sigma=self.diag_sigma, horizon=self.horizon, warm_start=warm)

    def fit(self, X, Z=None):
        series = as_series(X, Z)
        ctx = self._context(series.M, series.N) if self.Q else None
        self.model_, self.report_ = fit(series, self.P, self.Q, ctx, self._options())
        self.n_iter_ = self.report_.iters_run
        self.converged_ = self.report_.converged
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            from sklearn.exceptions import NotFittedError

            raise NotFittedError("MARAC instance is not fitted yet")

    def predict(self, X, Z=None):
        """Predictions aligned with ``X``; frames without enough history are NaN."""
        self._check_fitted()
        return self.model_.predict(X, Z)

    def forecast(self, X, Z=None):
        """Forecast the frame ``horizon`` steps after the last frame of ``X``."""
        self._check_fitted()
        series = as_series(X, Z)
        return self.model_.predict_one(series.X, series.z)

    def score(self, X, Z=None):
        """Negative one-step RMSE over frames with full history."""
        self._check_fitted()
        series = as_series(X, Z)
        pred = self.model_.predict_targets(series)
        return -rmse(pred, series.X[series.T - pred.shape[0]:])
