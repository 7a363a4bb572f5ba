"""Joint stationarity of the matrix autoregression and the auxiliary VAR."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .exceptions import ShapeError
from .linalg import spectral_radius


def companion_matrix(blocks):
    blocks = [np.atleast_2d(np.asarray(b, dtype=float)) for b in blocks]
    if not blocks:
        raise ShapeError("need at least one block")
    k = blocks[0].shape[0]
    for b in blocks:
        if b.shape != (k, k):
            raise ShapeError(f"companion blocks must all be {k}x{k}, got {b.shape}")
    L = len(blocks)
    comp = np.zeros((k * L, k * L))
    comp[:k] = np.hstack(blocks)
    if L > 1:
        comp[k:, :-k] = np.eye(k * (L - 1))
    return comp


def companion_radius(blocks):
    """Spectral radius of the VAR(1) embedding of a VAR(L) with coefficient ``blocks``."""
    return spectral_radius(companion_matrix(blocks))


@dataclass
class StationarityVerdict:
    marac_radius: float
    aux_radius: float
    stationary: bool
    margin: float = 1e-6

    def to_dict(self):
        return asdict(self)


def check_stationarity(A, B, C=(), margin=1e-6):
    """Verdict for AR pairs ``(A_p, B_p)`` and auxiliary VAR coefficients ``C``.

    Tensor coefficients of the auxiliary covariates never affect stationarity,
    so they are not an input.
    """
    if len(A) != len(B):
        raise ShapeError("A and B must have the same number of lags")
    marac = companion_radius([np.kron(b, a) for a, b in zip(A, B)]) if A else 0.0
    if len(A) == 1:
        product = spectral_radius(A[0]) * spectral_radius(B[0])
        assert abs(marac - product) <= 1e-8 * max(1.0, product), (marac, product)
    aux = companion_radius(list(C)) if len(C) else 0.0
    return StationarityVerdict(
        marac_radius=float(marac),
        aux_radius=float(aux),
        stationary=bool(marac < 1 - margin and aux < 1 - margin),
        margin=margin,
    )
