"""Input validation helpers shared by the estimators and the CLI."""

from __future__ import annotations

import numpy as np

__all__ = ["check_float_array", "check_positive", "check_in_unit_interval"]


def check_float_array(x, name: str, ndim=None, allow_empty: bool = False) -> np.ndarray:
    """Coerce to a float64 array and reject NaN/Inf entries."""
    arr = np.asarray(x, dtype=np.float64)
    if ndim is not None:
        allowed = (ndim,) if np.isscalar(ndim) else tuple(ndim)
        if arr.ndim not in allowed:
            raise ValueError(f"{name}: expected {allowed}-dimensional array, got shape {arr.shape}")
    if not allow_empty and arr.size == 0:
        raise ValueError(f"{name}: array is empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: contains non-finite values")
    return arr


def check_positive(value, name: str) -> float:
    value = float(value)
    if not value > 0:
        raise ValueError(f"{name} must be positive, got {value}")
    return value


def check_in_unit_interval(value, name: str, open_ends: bool = True) -> float:
    value = float(value)
    ok = (0.0 < value < 1.0) if open_ends else (0.0 <= value <= 1.0)
    if not ok:
        raise ValueError(f"{name} must lie in (0, 1), got {value}")
    return value
