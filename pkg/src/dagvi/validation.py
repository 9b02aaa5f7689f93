"""Input checks shared by the estimator and the command line."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

__all__ = ["check_observations", "check_adjacency", "check_positive", "check_lr_grid"]


def check_observations(X, name: str = "X", min_samples: int = 2, n_features: int | None = None) -> np.ndarray:
    """2-D finite float64 matrix with at least two columns."""
    X = check_array(X, dtype=np.float64, ensure_min_samples=min_samples, ensure_min_features=2, input_name=name)
    if n_features is not None and X.shape[1] != n_features:
        raise ValueError(f"{name} has {X.shape[1]} features, expected {n_features}")
    return X


def check_adjacency(A, d: int | None = None, name: str = "adjacency") -> np.ndarray:
    A = check_array(A, dtype=np.float64, ensure_min_samples=2, ensure_min_features=2, input_name=name)
    if A.shape[0] != A.shape[1]:
        raise ValueError(f"{name} must be square, got {A.shape}")
    if d is not None and A.shape[0] != d:
        raise ValueError(f"{name} is {A.shape[0]}x{A.shape[0]}, expected {d}x{d}")
    if not np.all(np.isin(A, (0.0, 1.0))):
        raise ValueError(f"{name} must be binary")
    return A


def check_positive(value, name: str, integer: bool = False):
    if integer:
        if int(value) != value or value < 1:
            raise ValueError(f"{name} must be a positive integer, got {value!r}")
        return int(value)
    value = float(value)
    if not value > 0 or not np.isfinite(value):
        raise ValueError(f"{name} must be positive and finite, got {value!r}")
    return value


def check_lr_grid(grid) -> tuple[float, ...]:
    if isinstance(grid, str):
        grid = [g for g in grid.split(",") if g.strip()]
    out = tuple(check_positive(g, "learning rate") for g in grid)
    if not out:
        raise ValueError("learning-rate grid is empty")
    return out
