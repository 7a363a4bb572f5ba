"""The fitted MARAC(P, Q) model: coefficients, prediction, likelihood and objective."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import serialization as ser
from .exceptions import ContractError, FormatError, InsufficientDataError, ShapeError
from .kernels import KernelContext, context_from_dict
from .linalg import spd_cholesky, unvec
from .series import as_series


def ar_term(A, B, Xlag):
    """``A @ X @ B.T`` for every frame of ``Xlag`` (T, M, N)."""
    return A @ Xlag @ B.T


def aux_term(G, Zlag):
    """Tensor-vector products of ``G`` (M, N, D) with every row of ``Zlag`` (T, D)."""
    M, N, D = G.shape
    return (Zlag @ G.reshape(M * N, D).T).reshape(-1, M, N)


def quad_form(R, sigma_r_inv, sigma_c_inv):
    """``sum_t tr(Sr^-1 R_t Sc^-1 R_t^T)`` without forming Kronecker products."""
    return float(np.sum((sigma_r_inv @ R @ sigma_c_inv) * R))


def logdet_kron(sigma_r, sigma_c):
    """``log|Sc (x) Sr| = N log|Sr| + M log|Sc|``."""
    M, N = sigma_r.shape[0], sigma_c.shape[0]
    Lr, _ = spd_cholesky(sigma_r)
    Lc, _ = spd_cholesky(sigma_c)
    return 2.0 * (N * np.sum(np.log(np.diag(Lr))) + M * np.sum(np.log(np.diag(Lc))))


@dataclass
class MaracModel:
    """Coefficients of a MARAC(P, Q) model.

    Exactly one of ``gamma`` (representer coefficients, ``(M*N, D)`` per lag) or
    ``theta`` (truncated-basis coefficients, ``(R, D)`` per lag) is used for the
    auxiliary part. ``horizon`` is the target offset ``h``: predictors at
    ``t-1, ..., t-P`` map to the frame at ``t + h - 1``.
    """

    A: List[np.ndarray]
    B: List[np.ndarray]
    sigma_r: np.ndarray
    sigma_c: np.ndarray
    gamma: Optional[List[np.ndarray]] = None
    theta: Optional[List[np.ndarray]] = None
    lam: float = 0.0
    ctx: Optional[KernelContext] = None
    diag_sigma: bool = False
    horizon: int = 1
    D: int = 0
    _G: Optional[List[np.ndarray]] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.gamma is not None and self.theta is not None:
            raise ContractError("a model stores either gamma or theta, not both")
        if len(self.A) != len(self.B):
            raise ShapeError("A and B must have one matrix per lag")
        coef = self.aux_coefs
        if coef:
            self.D = coef[0].shape[1]
            if self.ctx is None:
                raise ContractError("auxiliary coefficients need a kernel context")
        if self.horizon < 1:
            raise ContractError("horizon must be >= 1")

    @property
    def P(self):
        return len(self.A)

    @property
    def Q(self):
        return len(self.aux_coefs)

    @property
    def M(self):
        return self.sigma_r.shape[0]

    @property
    def N(self):
        return self.sigma_c.shape[0]

    @property
    def mode(self):
        return "truncated" if self.theta is not None else "exact"

    @property
    def aux_coefs(self):
        if self.theta is not None:
            return self.theta
        return self.gamma or []

    @property
    def lag_offset(self):
        return self.horizon - 1

    @property
    def min_history(self):
        """Index of the first frame that can be a target."""
        return max(self.P, self.Q) + self.lag_offset

    def coef_tensor(self, q):
        """Tensor coefficient for auxiliary lag ``q`` (1-based), shape ``(M, N, D)``."""
        if not 1 <= q <= self.Q:
            raise ContractError(f"lag q={q} outside 1..{self.Q}")
        return self.coef_tensors()[q - 1]

    def coef_tensors(self):
        if self._G is None:
            basis = self.ctx.basis if self.mode == "truncated" else (self.ctx.gram if self.ctx else None)
            self._G = [
                np.stack([unvec(basis @ c[:, d], self.M, self.N) for d in range(c.shape[1])], axis=2)
                for c in self.aux_coefs
            ]
        return self._G

    def kron_coefs(self):
        return [np.kron(B, A) for A, B in zip(self.A, self.B)]

    def sigma(self):
        return np.kron(self.sigma_c, self.sigma_r)

    # prediction ---------------------------------------------------------

    def predict_one(self, history_X, history_z=None):
        """Forecast from the most recent frames; ``history_X[-1]`` is the latest frame."""
        history_X = np.asarray(history_X, dtype=float)
        if history_X.ndim == 2:
            history_X = history_X[None]
        if history_X.shape[0] < self.P:
            raise InsufficientDataError(f"need {self.P} past frames, got {history_X.shape[0]}")
        out = np.zeros((self.M, self.N))
        for p in range(1, self.P + 1):
            out += self.A[p - 1] @ history_X[-p] @ self.B[p - 1].T
        if self.Q:
            history_z = np.asarray(history_z, dtype=float)
            if history_z.ndim == 1:
                history_z = history_z[None]
            if history_z.shape[0] < self.Q:
                raise InsufficientDataError(f"need {self.Q} past auxiliary vectors, got {history_z.shape[0]}")
            for q, G in enumerate(self.coef_tensors(), start=1):
                out += G @ history_z[-q]
        return out

    def forecast_latency(self, series, t, h=None):
        """Direct forecast of frame ``t + h - 1`` from frames and vectors before ``t``."""
        if h is not None and h != self.horizon:
            raise ContractError(f"model was fitted for horizon {self.horizon}, not {h}")
        series = as_series(series)
        if t < max(self.P, self.Q) or t > series.T:
            raise InsufficientDataError(f"not enough history before t={t}")
        return self.predict_one(series.X[:t], series.z[:t])

    def predict_targets(self, X, Z=None, start=None):
        """Predictions for every target frame ``s >= start``; returns ``(T - start, M, N)``."""
        series = as_series(X, Z)
        start = self.min_history if start is None else start
        if start < self.min_history:
            raise InsufficientDataError(f"targets before frame {self.min_history} lack history")
        T = series.T
        n = T - start
        out = np.zeros((max(n, 0), self.M, self.N))
        if n <= 0:
            return out
        off = self.lag_offset
        for p in range(1, self.P + 1):
            lo = start - off - p
            out += ar_term(self.A[p - 1], self.B[p - 1], series.X[lo:lo + n])
        for q, G in enumerate(self.coef_tensors(), start=1):
            lo = start - off - q
            out += aux_term(G, series.z[lo:lo + n])
        return out

    def predict(self, X, Z=None):
        """Predictions aligned with the input frames; rows without history are NaN."""
        series = as_series(X, Z)
        out = np.full(series.X.shape, np.nan)
        start = self.min_history
        if start < series.T:
            out[start:] = self.predict_targets(series, start=start)
        return out

    def residuals(self, X, Z=None, start=None):
        series = as_series(X, Z)
        start = self.min_history if start is None else start
        return series.X[start:] - self.predict_targets(series, start=start)

    def residual(self, series, t):
        series = as_series(series)
        if t < self.min_history or t >= series.T:
            raise InsufficientDataError(f"frame {t} lacks full history")
        return self.residuals(series, start=t)[0]

    # likelihood ---------------------------------------------------------

    def neg_log_likelihood(self, series, start=None):
        """Average negative Gaussian log-likelihood over the conditioned frames (constants dropped)."""
        R = self.residuals(series, start=start)
        if R.shape[0] < 1:
            raise InsufficientDataError("no frames to condition on")
        return self._nll_from_residuals(R)

    def log_likelihood_sum(self, series, start=None):
        R = self.residuals(series, start=start)
        return -R.shape[0] * self._nll_from_residuals(R)

    def _nll_from_residuals(self, R):
        Tp = R.shape[0]
        Lr, _ = spd_cholesky(self.sigma_r)
        Lc, _ = spd_cholesky(self.sigma_c)
        sr_inv = np.linalg.inv(self.sigma_r)
        sc_inv = np.linalg.inv(self.sigma_c)
        logdet = 2.0 * (self.N * np.sum(np.log(np.diag(Lr))) + self.M * np.sum(np.log(np.diag(Lc))))
        return 0.5 * logdet + 0.5 * quad_form(R, sr_inv, sc_inv) / Tp

    def penalty(self):
        total = 0.0
        if self.mode == "truncated":
            inv_lam = 1.0 / self.ctx.eigenvalues
            for th in self.theta:
                total += float(np.sum(inv_lam[:, None] * th * th))
        else:
            for g in self.gamma or []:
                total += float(np.sum(g * (self.ctx.gram @ g)))
        return total

    def penalized_objective(self, series, start=None):
        return self.neg_log_likelihood(series, start=start) + 0.5 * self.lam * self.penalty()

    # persistence --------------------------------------------------------

    def to_dict(self):
        d = {
            "kind": "marac",
            "M": self.M,
            "N": self.N,
            "D": self.D,
            "P": self.P,
            "Q": self.Q,
            "horizon": self.horizon,
            "lambda": self.lam,
            "diag_sigma": self.diag_sigma,
            "mode": self.mode,
            "A": ser.encode_list(self.A),
            "B": ser.encode_list(self.B),
            "sigma_r": ser.encode_array(self.sigma_r),
            "sigma_c": ser.encode_array(self.sigma_c),
        }
        if self.theta is not None:
            d["theta"] = ser.encode_list(self.theta)
        elif self.gamma is not None:
            d["gamma"] = ser.encode_list(self.gamma)
        if self.ctx is not None:
            d["grid"] = self.ctx.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        if d.get("kind", "marac") != "marac":
            raise FormatError(f"expected a marac model document, got kind {d.get('kind')!r}")
        try:
            ctx = context_from_dict(d["grid"]) if "grid" in d else None
            model = cls(
                A=ser.decode_list(d["A"]),
                B=ser.decode_list(d["B"]),
                sigma_r=ser.decode_array(d["sigma_r"]),
                sigma_c=ser.decode_array(d["sigma_c"]),
                gamma=ser.decode_list(d["gamma"]) if "gamma" in d else None,
                theta=ser.decode_list(d["theta"]) if "theta" in d else None,
                lam=float(d.get("lambda", 0.0)),
                ctx=ctx,
                diag_sigma=bool(d.get("diag_sigma", False)),
                horizon=int(d.get("horizon", 1)),
                D=int(d.get("D", 0)),
            )
        except KeyError as exc:
            raise FormatError(f"model document is missing field {exc.args[0]!r}") from None
        return model

    def save(self, path):
        ser.write_json(self.to_dict(), path)

    @classmethod
    def load(cls, path):
        return cls.from_dict(ser.read_json(path))
