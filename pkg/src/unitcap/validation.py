"""Input validation helpers shared by the estimators and functional APIs."""

from __future__ import annotations

import numpy as np

__all__ = ["check_matrix", "check_finite", "check_positive"]


def check_matrix(x, name: str = "X", *, allow_empty: bool = False) -> np.ndarray:
    """Coerce ``x`` to a C-contiguous float64 2-D array with finite entries."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if not allow_empty and arr.shape[0] == 0:
        raise ValueError(f"{name} must contain at least one row")
    check_finite(arr, name)
    return arr


def check_finite(x: np.ndarray, name: str = "array") -> None:
    if x.size and not np.isfinite(x).all():
        raise ValueError(f"{name} contains non-finite values")


def check_positive(value, name: str) -> None:
    if not value > 0:
        raise ValueError(f"{name} must be positive, got {value!r}")
