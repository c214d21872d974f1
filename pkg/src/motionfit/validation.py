"""Input validation helpers used at public API boundaries."""

from __future__ import annotations

import numpy as np

from .errors import ShapeError


def as_float_array(x, name: str, shape: tuple | None = None) -> np.ndarray:
    """Coerce ``x`` to a float64 ndarray, checking finiteness and shape.

    ``shape`` entries of ``None`` match any size.
    """
    arr = np.asarray(x, dtype=float)
    if shape is not None:
        if arr.ndim != len(shape) or any(
            s is not None and s != d for s, d in zip(shape, arr.shape)
        ):
            raise ShapeError(f"{name}: expected shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ShapeError(f"{name}: contains non-finite values")
    return arr


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def check_positive(value: float, name: str) -> float:
    value = float(value)
    if not value > 0:
        raise ShapeError(f"{name} must be positive, got {value}")
    return value
