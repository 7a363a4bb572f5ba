"""Synthetic MARAC(P, Q) data with known coefficients."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .exceptions import ContractError, StationarityError
from .kernels import SPHERE, GridSpec, KernelContext, kernel_from_dict
from .linalg import spd_cholesky, spd_solve, spectral_radius
from .model import MaracModel
from .series import MatrixSeries
from .stationarity import check_stationarity, companion_radius


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def gen_banded_stationary(size, band, target, seed=None):
    """Random symmetric banded matrix scaled to spectral radius ``target``."""
    if band >= size and size > 1:
        raise ContractError("band must be smaller than the matrix size")
    rng = _rng(seed)
    a = rng.uniform(-1.0, 1.0, (size, size))
    a = 0.5 * (a + a.T)
    i, j = np.indices((size, size))
    a[np.abs(i - j) > band] = 0.0
    rho = spectral_radius(a)
    if rho == 0:
        a = np.eye(size)
        rho = 1.0
    return a * (target / rho)


def banded_covariance(size, band=1, offdiag=0.3):
    """Unit-diagonal symmetric Toeplitz band with constant off-diagonal value."""
    i, j = np.indices((size, size))
    out = np.where(np.abs(i - j) <= band, offdiag, 0.0)
    np.fill_diagonal(out, 1.0)
    return out


def gen_ar_pairs(M, N, P, band, target, seed=None):
    """AR pairs whose Kronecker products have companion radius exactly ``target``.

    Each factor starts at spectral radius ``sqrt(target)``; lag ``p`` of the
    column factor is then scaled by ``c**p``, which scales the companion radius
    by exactly ``c``.
    """
    rng = _rng(seed)
    root = np.sqrt(target)
    A = [gen_banded_stationary(M, min(band, M - 1), root, rng) for _ in range(P)]
    B = [gen_banded_stationary(N, min(band, N - 1), root, rng) for _ in range(P)]
    if P > 1:
        c = target / companion_radius([np.kron(b, a) for a, b in zip(A, B)])
        B = [b * c ** (p + 1) for p, b in enumerate(B)]
    return A, B


def gen_gp_functions(ctx, count, seed=None):
    """``count`` draws from a zero-mean Gaussian process with the context's Gram matrix."""
    rng = _rng(seed)
    L, _ = spd_cholesky(ctx.gram)
    return [L @ rng.standard_normal(ctx.grid.S) for _ in range(count)]


def gen_var1(D, T_total, C1, seed=None, burn_in=200):
    """``T_total`` frames of ``z_t = C1 z_{t-1} + nu_t`` after discarding ``burn_in``."""
    C1 = np.atleast_2d(np.asarray(C1, dtype=float))
    if C1.shape != (D, D):
        raise ContractError(f"C1 must be {D}x{D}")
    if spectral_radius(C1) >= 1:
        raise ContractError("VAR(1) coefficient is not stationary")
    rng = _rng(seed)
    z = np.zeros((burn_in + T_total, D))
    prev = np.zeros(D)
    for t in range(burn_in + T_total):
        prev = C1 @ prev + rng.standard_normal(D)
        z[t] = prev
    return z[burn_in:]


def sample_noise(sigma_r, sigma_c, seed=None, size=None):
    """Matrix normal draws ``L_r Z L_c^T`` with ``vec`` covariance ``sigma_c (x) sigma_r``."""
    Lr, _ = spd_cholesky(sigma_r)
    Lc, _ = spd_cholesky(sigma_c)
    rng = _rng(seed)
    shape = (sigma_r.shape[0], sigma_c.shape[0]) if size is None else (size, sigma_r.shape[0], sigma_c.shape[0])
    return Lr @ rng.standard_normal(shape) @ Lc.T


@dataclass
class SimConfig:
    M: int = 5
    N: int = 5
    D: int = 3
    P: int = 1
    Q: int = 1
    T_train: int = 1000
    T_val: int = 500
    T_test: int = 1000
    band_width: int = 2
    target_radius: float = 0.8
    aux_coef: float = 0.5
    noise: str = "banded"
    noise_offdiag: float = 0.3
    noise_scale: float = 1.0
    kernel: dict = field(default_factory=lambda: {"family": "lebedev", "eta": 3.0})
    grid_kind: str = SPHERE
    seed: int = 0
    burn_in: int = 200

    def __post_init__(self):
        if not 0 <= self.target_radius < 1:
            raise StationarityError(f"target_radius {self.target_radius} is not inside [0, 1)")
        if min(self.M, self.N) < 1 or self.D < 0 or self.P < 0 or self.Q < 0:
            raise ContractError("shapes and lags must be positive")
        if self.burn_in < 0:
            raise ContractError("burn_in must be non-negative")
        if self.Q > 0 and self.D < 1:
            raise ContractError("Q > 0 needs D >= 1")

    @property
    def T_total(self):
        return self.T_train + self.T_val + self.T_test

    def to_dict(self):
        return asdict(self)


@dataclass
class SimBundle:
    series: MatrixSeries
    split: tuple
    truth: dict
    config: SimConfig
    ctx: Optional[KernelContext] = None

    @property
    def train(self):
        return self.series.slice(0, self.split[0])

    def truth_model(self):
        """The generating coefficients as a :class:`MaracModel` (representer form)."""
        t = self.truth
        gamma = None
        if t["G"]:
            S = self.ctx.grid.S
            gamma = [spd_solve(self.ctx.gram, G.reshape(S, -1, order="F")) for G in t["G"]]
        return MaracModel(A=t["A"], B=t["B"], sigma_r=t["sigma_r"], sigma_c=t["sigma_c"], gamma=gamma,
                          ctx=self.ctx if gamma else None, D=self.series.D)


def _noise_covs(cfg):
    if cfg.noise == "banded":
        sr = banded_covariance(cfg.M, 1, cfg.noise_offdiag)
        sc = banded_covariance(cfg.N, 1, cfg.noise_offdiag)
    elif cfg.noise in ("identity", "diagonal"):
        sr, sc = np.eye(cfg.M), np.eye(cfg.N)
    else:
        raise ContractError(f"unknown noise structure {cfg.noise!r}")
    return sr * cfg.noise_scale, sc


def simulate(cfg):
    """Generate a stationary MARAC(P, Q) series with train/validation/test splits."""
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(4)]
    coef_rng, gp_rng, aux_rng, noise_rng = streams
    A, B = gen_ar_pairs(cfg.M, cfg.N, cfg.P, cfg.band_width, cfg.target_radius, coef_rng)
    C1 = cfg.aux_coef * np.eye(cfg.D)
    verdict = check_stationarity(A, B, [C1] if cfg.D else [])
    if not verdict.stationary:
        raise StationarityError(
            f"generated coefficients are not stationary (radius {verdict.marac_radius:.4f}, aux {verdict.aux_radius:.4f})"
        )
    ctx = None
    G = []
    g_values = []
    if cfg.Q > 0:
        ctx = KernelContext.build(GridSpec(cfg.grid_kind, cfg.M, cfg.N), kernel_from_dict(cfg.kernel))
        g_values = gen_gp_functions(ctx, cfg.Q * cfg.D, gp_rng)
        for q in range(cfg.Q):
            slices = g_values[q * cfg.D:(q + 1) * cfg.D]
            G.append(np.stack([g.reshape(cfg.M, cfg.N, order="F") for g in slices], axis=2))
    sigma_r, sigma_c = _noise_covs(cfg)
    total = cfg.burn_in + cfg.T_total
    z = gen_var1(cfg.D, total, C1, aux_rng, cfg.burn_in) if cfg.D else np.zeros((total, 0))
    noise = sample_noise(sigma_r, sigma_c, noise_rng, size=total)
    X = np.zeros((total, cfg.M, cfg.N))
    for t in range(total):
        x = noise[t].copy()
        for p in range(1, cfg.P + 1):
            if t - p >= 0:
                x += A[p - 1] @ X[t - p] @ B[p - 1].T
        for q in range(1, cfg.Q + 1):
            if t - q >= 0:
                x += G[q - 1] @ z[t - q]
        X[t] = x
    keep = slice(cfg.burn_in, total)
    series = MatrixSeries(X[keep], z[keep])
    split = (cfg.T_train, cfg.T_train + cfg.T_val)
    truth = {
        "A": A,
        "B": B,
        "G": G,
        "g": g_values,
        "sigma_r": sigma_r,
        "sigma_c": sigma_c,
        "C1": C1,
        "noise": noise[keep],
        "verdict": verdict.to_dict(),
    }
    return SimBundle(series=series, split=split, truth=truth, config=cfg, ctx=ctx)
