"""Dense matrix and order-3 tensor primitives.

Tensors of shape ``(M, N, D)`` store slice ``d`` as ``g[:, :, d]``.
Vectorization is column-stacking: ``vec(a)[i + j * M] == a[i, j]``.
"""

import numpy as np
from scipy import linalg as sla

from .exceptions import ContractError, ShapeError, SingularityError


def kron(a, b):
    """Kronecker product; block ``(i, j)`` of the result is ``a[i, j] * b``."""
    return np.kron(np.asarray(a, dtype=float), np.asarray(b, dtype=float))


def tvp(g, z):
    """Contract the last mode of ``g`` (M, N, D) against ``z`` (D,)."""
    g = np.asarray(g, dtype=float)
    z = np.asarray(z, dtype=float)
    if g.ndim != 3 or z.ndim != 1 or g.shape[2] != z.shape[0]:
        raise ShapeError(f"tvp: tensor {g.shape} incompatible with vector {z.shape}")
    return g @ z


def vec(a):
    a = np.asarray(a, dtype=float)
    if a.ndim != 2:
        raise ShapeError(f"vec expects a matrix, got shape {a.shape}")
    return a.reshape(-1, order="F")


def unvec(v, M, N):
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.shape[0] != M * N:
        raise ShapeError(f"unvec: length {v.shape} does not match {M}x{N}")
    return v.reshape((M, N), order="F")


def mode3_mat(g):
    """Mode-3 matricization, ``(D, M*N)`` with row ``d`` equal to ``vec(g[:, :, d])``."""
    g = np.asarray(g, dtype=float)
    if g.ndim != 3:
        raise ShapeError(f"mode3_mat expects an order-3 tensor, got {g.shape}")
    M, N, D = g.shape
    return g.reshape(M * N, D, order="F").T.copy()


def from_mode3(gmat, M, N):
    """Inverse of :func:`mode3_mat`."""
    gmat = np.asarray(gmat, dtype=float)
    D = gmat.shape[0]
    if gmat.shape[1] != M * N:
        raise ShapeError(f"from_mode3: {gmat.shape} does not match {M}x{N}")
    return gmat.T.reshape((M, N, D), order="F")


def _check_symmetric(a, rtol=1e-10):
    scale = max(np.abs(a).max(), 1.0)
    if np.abs(a - a.T).max() > rtol * scale:
        raise ContractError("matrix is not symmetric")


def spd_cholesky(a, jitter=0.0):
    """Lower Cholesky factor of ``a + jitter * I`` with escalating jitter.

    Returns ``(L, jitter_used)``. Jitter grows tenfold from ``max(jitter,
    1e-14 * trace(a)/n)`` up to ``1e-6 * trace(a)/n``.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"expected a square matrix, got {a.shape}")
    _check_symmetric(a)
    n = a.shape[0]
    scale = abs(np.trace(a)) / n if n else 0.0
    max_jitter = max(1e-6 * scale, jitter)
    current = jitter
    eye = np.eye(n)
    while True:
        try:
            L = np.linalg.cholesky(a + current * eye)
            if np.all(np.isfinite(L)):
                return L, current
        except np.linalg.LinAlgError:
            pass
        if current >= max_jitter or max_jitter == 0.0:
            raise SingularityError("matrix is not positive definite at maximum jitter")
        current = min(max(current * 10.0, 1e-14 * scale), max_jitter)


def spd_solve(a, b, jitter=0.0):
    """Solve ``(a + jitter * I) x = b`` for symmetric positive definite ``a``."""
    L, _ = spd_cholesky(a, jitter)
    b = np.asarray(b, dtype=float)
    return sla.cho_solve((L, True), b)


def spd_inv(a, jitter=0.0):
    a = np.asarray(a, dtype=float)
    return spd_solve(a, np.eye(a.shape[0]), jitter)


def spd_logdet(a):
    L, _ = spd_cholesky(a)
    return 2.0 * np.sum(np.log(np.diag(L)))


def kron_diff_bound(a_new, a_old, b_new, b_old):
    """Upper bound on ``||kron(b_new, a_new) - kron(b_old, a_old)||_F``."""
    a_new, a_old, b_new, b_old = (np.asarray(m, dtype=float) for m in (a_new, a_old, b_new, b_old))
    if a_new.shape != a_old.shape or b_new.shape != b_old.shape:
        raise ShapeError("kron_diff_bound: mismatched shapes within a pair")
    return float(
        np.linalg.norm(b_new - b_old) * np.linalg.norm(a_new)
        + np.linalg.norm(b_old) * np.linalg.norm(a_new - a_old)
    )


def spectral_radius(a):
    a = np.asarray(a, dtype=float)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(a))))
