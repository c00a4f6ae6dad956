"""Validate inputs at operation boundaries and enforce finite, well-shaped values."""

import numpy as np

from isda_lab.errors import DomainError, NumericError

# Row sums of probability matrices must be this close to 1.
PROB_ROW_TOL = 1e-9


def as_float_array(value: object, name: str, *, ndim: int | None = None) -> np.ndarray:
    """Convert to a float64 array and check dimensionality."""
    arr = np.asarray(value, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise DomainError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    return arr


def require_finite(arr: np.ndarray, name: str) -> np.ndarray:
    """Reject NaN/Inf entries, reporting the first offending row when 2-D."""
    if np.all(np.isfinite(arr)):
        return arr
    if arr.ndim >= 2:
        bad = int(np.argmax(~np.all(np.isfinite(arr.reshape(arr.shape[0], -1)), axis=1)))
        raise NumericError(f"{name} contains non-finite values", index=bad)
    raise NumericError(f"{name} contains non-finite values")


def require_shape(arr: np.ndarray, shape: tuple[int | None, ...], name: str) -> np.ndarray:
    """Check shape; None entries match any size."""
    if arr.ndim != len(shape) or any(
        want is not None and got != want for got, want in zip(arr.shape, shape)
    ):
        raise DomainError(f"{name} has shape {arr.shape}, expected {shape}")
    return arr


def require_symmetric(mat: np.ndarray, name: str, *, rel_tol: float = 1e-9) -> np.ndarray:
    """Square matrix with ||S - S^T||_inf below rel_tol * ||S||_inf."""
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise DomainError(f"{name} must be square, got shape {mat.shape}")
    scale = np.max(np.abs(mat)) if mat.size else 0.0
    asym = np.max(np.abs(mat - mat.T)) if mat.size else 0.0
    if asym > rel_tol * scale:
        raise DomainError(f"{name} is not symmetric (max asymmetry {asym:.3e})")
    return mat


def require_labels(labels: object, num_classes: int, name: str = "labels") -> np.ndarray:
    """Integer labels in [0, num_classes)."""
    arr = np.asarray(labels)
    if arr.ndim != 1:
        raise DomainError(f"{name} must be 1-dimensional, got shape {arr.shape}")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.equal(np.mod(arr, 1), 0)):
            raise DomainError(f"{name} must be integers")
    arr = arr.astype(np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
        raise DomainError(f"{name} out of range [0, {num_classes})")
    return arr


def require_probability_rows(probs: np.ndarray, name: str = "probs") -> np.ndarray:
    """Rows in [0, 1] summing to 1 within PROB_ROW_TOL."""
    if probs.ndim != 2:
        raise DomainError(f"{name} must be 2-dimensional, got shape {probs.shape}")
    require_finite(probs, name)
    if probs.size and (probs.min() < 0.0 or probs.max() > 1.0):
        raise DomainError(f"{name} entries must lie in [0, 1]")
    sums = probs.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > PROB_ROW_TOL)
    if bad.size:
        raise DomainError(f"{name} row {int(bad[0])} sums to {sums[bad[0]]:.12f}, not 1")
    return probs


def require_non_negative(value: float, name: str) -> float:
    if not np.isfinite(value) or value < 0:
        raise DomainError(f"{name} must be a finite non-negative number, got {value}")
    return float(value)
