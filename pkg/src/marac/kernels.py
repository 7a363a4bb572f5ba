"""Spatial grids, kernels, Gram matrices and truncated Mercer bases.

Grid location ``u`` corresponds to matrix entry ``(i, j)`` with ``u = i + j * M``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .exceptions import ContractError, FormatError
from .linalg import kron

PLANAR = "planar_unit_square"
SPHERE = "sphere_latlon"


@dataclass(frozen=True)
class GridSpec:
    """An ``M x N`` grid of spatial locations.

    Planar grids place rows and columns evenly on ``[0, 1]``. Sphere grids use
    polar angles evenly spaced inside ``(0, 180)`` degrees (poles excluded) and
    azimuths ``360 * j / N`` degrees.
    """

    kind: str
    M: int
    N: int

    def __post_init__(self):
        if self.kind not in (PLANAR, SPHERE):
            raise ContractError(f"unknown grid kind {self.kind!r}")
        if self.M < 1 or self.N < 1:
            raise ContractError("grid dimensions must be positive")

    @property
    def S(self):
        return self.M * self.N

    def row_coords(self):
        if self.kind == PLANAR:
            return np.linspace(0.0, 1.0, self.M) if self.M > 1 else np.array([0.5])
        return 180.0 * (np.arange(self.M) + 0.5) / self.M

    def col_coords(self):
        if self.kind == PLANAR:
            return np.linspace(0.0, 1.0, self.N) if self.N > 1 else np.array([0.5])
        return 360.0 * np.arange(self.N) / self.N

    def locations(self):
        """``(S, 2)`` array of coordinates in vectorization order."""
        r = np.tile(self.row_coords(), self.N)
        c = np.repeat(self.col_coords(), self.M)
        return np.column_stack([r, c])

    def unit_vectors(self):
        if self.kind != SPHERE:
            raise ContractError("unit vectors are only defined for sphere grids")
        loc = np.deg2rad(self.locations())
        return sphere_to_xyz(loc[:, 0], loc[:, 1])


def sphere_to_xyz(theta, phi):
    """Euclidean unit vectors for polar angle ``theta`` and azimuth ``phi`` (radians)."""
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    return np.stack(
        [np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)], axis=-1
    )


def lebedev_from_cosine(c, eta=3.0):
    c = np.clip(np.asarray(c, dtype=float), -1.0, 1.0)
    return _lebedev_from_half_chord(np.sqrt((1.0 - c) / 2.0), eta)


def _lebedev_from_half_chord(h, eta):
    # sqrt((1 - c) / 2) equals half the chord length, which stays accurate near c = 1
    return (1.0 / (4 * np.pi) + eta / (12 * np.pi)) - eta / (8 * np.pi) * np.minimum(h, 1.0)


def _half_chord(x1, x2):
    return 0.5 * np.linalg.norm(x1[..., :, None, :] - x2[..., None, :, :], axis=-1)


def lebedev_eval(s1, s2, eta=3.0):
    """Lebedev kernel between two points given as ``(theta, phi)`` in radians.

    The inner product in the kernel is the cosine of the central angle.
    """
    if eta <= 0:
        raise ContractError("eta must be positive")
    x1 = sphere_to_xyz(*s1)
    x2 = sphere_to_xyz(*s2)
    return float(_lebedev_from_half_chord(0.5 * np.linalg.norm(x1 - x2), eta))


def _normalized_legendre(lmax, x):
    """``N_lm * P_l^m(x)`` for ``0 <= m <= l <= lmax``, no Condon-Shortley phase.

    Returns an array of shape ``(lmax + 1, lmax + 1) + x.shape`` indexed ``[l, m]``.
    """
    x = np.asarray(x, dtype=float)
    s = np.sqrt(np.clip(1.0 - x * x, 0.0, None))
    out = np.zeros((lmax + 1, lmax + 1) + x.shape)
    out[0, 0] = np.sqrt(1.0 / (4 * np.pi))
    for m in range(1, lmax + 1):
        out[m, m] = np.sqrt((2 * m + 1) / (2.0 * m)) * s * out[m - 1, m - 1]
    for m in range(0, lmax):
        out[m + 1, m] = np.sqrt(2 * m + 3.0) * x * out[m, m]
    for m in range(0, lmax + 1):
        for l in range(m + 2, lmax + 1):
            a = np.sqrt((4.0 * l * l - 1) / (l * l - m * m))
            b = np.sqrt(((l - 1.0) ** 2 - m * m) / (4.0 * (l - 1) ** 2 - 1))
            out[l, m] = a * (x * out[l - 1, m] - b * out[l - 2, m])
    return out


def spherical_harmonic(l, m, theta, phi):
    """Real orthonormal spherical harmonic ``Y_l^m`` at ``(theta, phi)`` in radians."""
    if l < 0 or abs(m) > l:
        raise ContractError(f"invalid harmonic degree/order l={l}, m={m}")
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    p = _normalized_legendre(l, np.cos(theta))[l, abs(m)]
    if m > 0:
        return np.sqrt(2.0) * p * np.cos(m * phi)
    if m < 0:
        return np.sqrt(2.0) * p * np.sin(-m * phi)
    return p * np.ones_like(phi)


def harmonic_basis(lmax, theta, phi):
    """All real harmonics up to degree ``lmax``, columns ordered by ``l`` then ``m = -l..l``."""
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    p = _normalized_legendre(lmax, np.cos(theta))
    cols = []
    for l in range(lmax + 1):
        for m in range(-l, l + 1):
            if m > 0:
                cols.append(np.sqrt(2.0) * p[l, m] * np.cos(m * phi))
            elif m < 0:
                cols.append(np.sqrt(2.0) * p[l, -m] * np.sin(-m * phi))
            else:
                cols.append(p[l, 0] * np.ones_like(phi))
    return np.column_stack(cols)


@dataclass(frozen=True)
class LebedevKernel:
    eta: float = 3.0

    family = "lebedev"

    def __post_init__(self):
        if self.eta <= 0:
            raise ContractError("eta must be positive")

    def raw_gram(self, grid):
        if grid.kind != SPHERE:
            raise ContractError("the Lebedev kernel needs a sphere grid")
        xyz = grid.unit_vectors()
        return _lebedev_from_half_chord(_half_chord(xyz, xyz), self.eta)

    def eigenvalues(self, lmax):
        lam = [1.0]
        for l in range(1, lmax + 1):
            lam.extend([self.eta / ((4 * l * l - 1) * (2 * l + 3))] * (2 * l + 1))
        return np.array(lam)

    def to_dict(self):
        return {"family": self.family, "eta": self.eta}


def matern_1d(u, s, lengthscale=0.3, nu=0.5):
    """Matern kernel on the line for ``nu`` in {0.5, 1.5, 2.5}; ``nu=0.5`` is exponential."""
    r = np.abs(np.subtract.outer(np.asarray(u, dtype=float), np.asarray(s, dtype=float))) / lengthscale
    if nu == 0.5:
        return np.exp(-r)
    if nu == 1.5:
        a = np.sqrt(3.0) * r
        return (1.0 + a) * np.exp(-a)
    if nu == 2.5:
        a = np.sqrt(5.0) * r
        return (1.0 + a + a * a / 3.0) * np.exp(-a)
    raise ContractError(f"unsupported Matern smoothness nu={nu}")


@dataclass(frozen=True)
class ProductKernel:
    """Separable planar kernel ``k((u, v), (s, t)) = k1(u, s) * k2(v, t)``.

    A lengthscale of ``inf`` gives the constant kernel.
    """

    row_lengthscale: float = 0.3
    col_lengthscale: float = 0.3
    nu: float = 0.5

    family = "planar_product"

    def factor_grams(self, grid):
        return (
            matern_1d(grid.row_coords(), grid.row_coords(), self.row_lengthscale, self.nu),
            matern_1d(grid.col_coords(), grid.col_coords(), self.col_lengthscale, self.nu),
        )

    def raw_gram(self, grid):
        if grid.kind != PLANAR:
            raise ContractError("the product kernel needs a planar grid")
        K1, K2 = self.factor_grams(grid)
        return kron(K2, K1)

    def to_dict(self):
        return {
            "family": self.family,
            "lengthscales": [self.row_lengthscale, self.col_lengthscale],
            "nu": self.nu,
        }


def gram_matrix(grid, kernel, rel_floor=1e-10):
    """Gram matrix over the grid, jittered so its smallest eigenvalue exceeds ``rel_floor * max``."""
    K = kernel.raw_gram(grid)
    K = 0.5 * (K + K.T)
    w = np.linalg.eigvalsh(K)
    floor = rel_floor * max(w[-1], 0.0)
    if w[0] <= floor:
        K = K + (floor - w[0] + floor) * np.eye(K.shape[0])
    return K


def truncated_basis(grid, kernel, R):
    """Leading ``R`` eigenfunction evaluations and eigenvalues of the kernel on the grid.

    For the Lebedev kernel ``R`` must be a perfect square ``(L + 1)**2`` and the basis is
    the real spherical harmonics up to degree ``L``. Other kernels fall back to the
    eigendecomposition of the Gram matrix.
    """
    if R < 1:
        raise ContractError("R must be at least 1")
    if isinstance(kernel, LebedevKernel):
        L = int(round(np.sqrt(R))) - 1
        if (L + 1) ** 2 != R:
            raise ContractError(f"R={R} is not (L+1)^2 for an integer degree L")
        loc = np.deg2rad(grid.locations())
        basis = harmonic_basis(L, loc[:, 0], loc[:, 1])
        return basis, kernel.eigenvalues(L)
    if R > grid.S:
        raise ContractError(f"R={R} exceeds the number of grid points {grid.S}")
    w, U = np.linalg.eigh(kernel.raw_gram(grid))
    order = np.argsort(w)[::-1][:R]
    w = np.clip(w[order], np.finfo(float).tiny, None)
    return U[:, order], w


@dataclass
class KernelContext:
    """Grid, kernel, Gram matrix and an optional truncated basis."""

    grid: GridSpec
    kernel: object
    gram: np.ndarray
    basis: Optional[np.ndarray] = None
    eigenvalues: Optional[np.ndarray] = None
    _eig: Optional[tuple] = field(default=None, repr=False)

    @classmethod
    def build(cls, grid, kernel=None, R=None):
        if kernel is None:
            kernel = LebedevKernel() if grid.kind == SPHERE else ProductKernel()
        ctx = cls(grid=grid, kernel=kernel, gram=gram_matrix(grid, kernel))
        if R is not None:
            ctx.basis, ctx.eigenvalues = truncated_basis(grid, kernel, R)
        return ctx

    def with_truncation(self, R):
        basis, eigenvalues = truncated_basis(self.grid, self.kernel, R)
        return KernelContext(self.grid, self.kernel, self.gram, basis, eigenvalues, self._eig)

    @property
    def R(self):
        return None if self.basis is None else self.basis.shape[1]

    def gram_eigh(self):
        if self._eig is None:
            self._eig = np.linalg.eigh(self.gram)
        return self._eig

    def gram_decay_exponent(self):
        """Slope ``r`` of ``log(rho_i(K)) ~ -r log(i)`` over the leading half of the spectrum."""
        w = np.sort(self.gram_eigh()[0])[::-1]
        n = max(len(w) // 2, 2)
        i = np.arange(1, n + 1)
        return float(-np.polyfit(np.log(i), np.log(w[:n]), 1)[0])

    def to_dict(self):
        d = {"kind": self.grid.kind, "M": self.grid.M, "N": self.grid.N, "kernel": self.kernel.to_dict()}
        if self.R is not None:
            d["R"] = self.R
        return d


def kernel_from_dict(d):
    family = d.get("family", "lebedev")
    if family == "lebedev":
        return LebedevKernel(eta=float(d.get("eta", 3.0)))
    if family == "planar_product":
        ls = d.get("lengthscales", [0.3, 0.3])
        return ProductKernel(float(ls[0]), float(ls[1]), float(d.get("nu", 0.5)))
    raise FormatError(f"unknown kernel family {family!r}")


def context_from_dict(d):
    try:
        grid = GridSpec(d["kind"], int(d["M"]), int(d["N"]))
    except KeyError as exc:
        raise FormatError(f"grid.json is missing field {exc.args[0]!r}") from None
    kernel = kernel_from_dict(d.get("kernel", {}))
    return KernelContext.build(grid, kernel, d.get("R"))


def load_grid_json(path):
    with open(path) as fh:
        return context_from_dict(json.load(fh))


def save_grid_json(ctx, path):
    with open(path, "w") as fh:
        json.dump(ctx.to_dict(), fh, indent=2)
