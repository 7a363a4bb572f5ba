"""Matrix time series container and input validation helpers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .exceptions import ContractError, ShapeError


def check_frames(X):
    X = np.asarray(X, dtype=float)
    if X.ndim != 3:
        raise ShapeError(f"expected frames of shape (T, M, N), got {X.shape}")
    if X.shape[0] < 1:
        raise ShapeError("need at least one frame")
    if not np.all(np.isfinite(X)):
        raise ContractError("frames contain non-finite values")
    return X


def check_aux(Z, T):
    if Z is None:
        return np.zeros((T, 0))
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    if Z.ndim != 2 or Z.shape[0] != T:
        raise ShapeError(f"auxiliary series must have shape ({T}, D), got {Z.shape}")
    if not np.all(np.isfinite(Z)):
        raise ContractError("auxiliary series contains non-finite values")
    return Z


@dataclass
class MatrixSeries:
    """``T`` frames ``X`` of shape ``(T, M, N)`` with auxiliary vectors ``z`` of shape ``(T, D)``."""

    X: np.ndarray
    z: np.ndarray
    timestamps: Optional[np.ndarray] = None

    def __post_init__(self):
        self.X = check_frames(self.X)
        self.z = check_aux(self.z, self.X.shape[0])
        if self.timestamps is not None and len(self.timestamps) != self.T:
            raise ShapeError("timestamps length does not match frame count")

    @property
    def T(self):
        return self.X.shape[0]

    @property
    def M(self):
        return self.X.shape[1]

    @property
    def N(self):
        return self.X.shape[2]

    @property
    def D(self):
        return self.z.shape[1]

    def slice(self, start, stop):
        ts = None if self.timestamps is None else self.timestamps[start:stop]
        return MatrixSeries(self.X[start:stop], self.z[start:stop], ts)


def as_series(X, Z=None):
    if isinstance(X, MatrixSeries):
        return X
    X = check_frames(X)
    return MatrixSeries(X, check_aux(Z, X.shape[0]))


def rmse(estimate, truth):
    """Frobenius error divided by the square root of the element count."""
    estimate = np.asarray(estimate, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if estimate.shape != truth.shape:
        raise ShapeError(f"rmse: shapes {estimate.shape} and {truth.shape} differ")
    return float(np.linalg.norm((estimate - truth).ravel()) / np.sqrt(truth.size))
