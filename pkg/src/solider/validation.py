"""Input validation helpers shared by the estimator facade and the CLI."""

from __future__ import annotations

import numbers

import numpy as np


def check_image_array(x, height: int | None = None, width: int | None = None) -> np.ndarray:
    """Validate an (n, 3, H, W) float image array."""
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[1] != 3:
        raise ValueError(f"expected images of shape (n, 3, H, W), got {x.shape}")
    if x.shape[0] == 0:
        raise ValueError("empty image array")
    if height is not None and (x.shape[2] != height or x.shape[3] != width):
        raise ValueError(f"expected {height}x{width} images, got {x.shape[2]}x{x.shape[3]}")
    if not np.isfinite(x).all():
        raise ValueError("images contain non-finite values")
    return x.astype(np.float32, copy=False)


def check_scalar(value, name: str, low=None, high=None, kind=numbers.Real):
    if not isinstance(value, kind) or isinstance(value, bool):
        raise TypeError(f"{name} must be a number, got {type(value).__name__}")
    if low is not None and value < low:
        raise ValueError(f"{name} must be >= {low}, got {value}")
    if high is not None and value > high:
        raise ValueError(f"{name} must be <= {high}, got {value}")
    return value


def check_matrix(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ValueError(f"expected a 2-d array, got shape {x.shape}")
    if x.shape[0] == 0:
        raise ValueError("empty input")
    if not np.isfinite(x).all():
        raise ValueError("input contains non-finite values")
    return x
