"""Input validation helpers shared by the estimator-style classes."""

from __future__ import annotations

import numbers

import numpy as np

from .errors import DataError

__all__ = ["check_volume_batch", "check_matrix", "check_seed"]


def check_volume_batch(X) -> np.ndarray:
    """Validate a batch of volumes shaped (n_samples, channels, nx, ny, nz)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 4:  # implicit single channel
        X = X[:, np.newaxis]
    if X.ndim != 5:
        raise DataError(f"expected a 5-D volume batch, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise DataError("volume batch contains non-finite values")
    return X


def check_matrix(X, min_samples: int = 1, name: str = "X") -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise DataError(f"{name} must be 2-D, got shape {X.shape}")
    if X.shape[0] < min_samples:
        raise DataError(f"{name} needs at least {min_samples} rows, got {X.shape[0]}")
    if not np.all(np.isfinite(X)):
        raise DataError(f"{name} contains non-finite values")
    return X


def check_seed(seed) -> int:
    if seed is None:
        return 0
    if not isinstance(seed, numbers.Integral):
        raise DataError(f"seed must be an integer, got {seed!r}")
    return int(seed)
