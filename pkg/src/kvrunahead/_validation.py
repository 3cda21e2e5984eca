"""Input validation helpers."""

from __future__ import annotations

import numpy as np
from sklearn.utils import check_array

from .exceptions import DimensionError, InputError

_DTYPES = {"f32": np.float32, "f64": np.float64}


def precision_dtype(precision: str) -> type:
    try:
        return _DTYPES[precision]
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}; expected one of {sorted(_DTYPES)}") from None


def check_matrix(x, *, cols: int | None = None, name: str = "matrix", dtype=None) -> np.ndarray:
    """Return ``x`` as a finite 2-D array, optionally checking its width."""
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    if cols is not None and arr.shape[1] != cols:
        raise DimensionError(f"{name} has {arr.shape[1]} columns, expected {cols}")
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{name} contains non-finite values")
    return arr


def check_context(context, d_model: int, dtype) -> np.ndarray:
    """Validate a prompt embedding matrix of shape ``(C, d_model)``.

    Empty contexts are an :class:`InputError`; wrong widths a :class:`DimensionError`.
    """
    arr = np.asarray(context)
    if arr.ndim == 2 and arr.shape[0] == 0:
        raise InputError("context must contain at least one token")
    try:
        arr = check_array(arr, dtype=dtype, ensure_all_finite=True, ensure_min_samples=1)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    if arr.shape[1] != d_model:
        raise DimensionError(f"context has {arr.shape[1]} columns, expected d_model={d_model}")
    return arr


def check_positive_int(value, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or int(value) != value or value < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)
