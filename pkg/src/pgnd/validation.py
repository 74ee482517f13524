"""Input validation helpers shared by the estimator and the functional API."""
from __future__ import annotations

import numpy as np

from .core import ValidationError


def check_cloud(points, name: str = "points", allow_empty: bool = False) -> np.ndarray:
    """Return ``points`` as a finite float64 (n, 3) array."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 3:
        arr = arr.reshape(1, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValidationError(f"{name} must have shape (n, 3), got {arr.shape}")
    if not allow_empty and arr.shape[0] == 0:
        raise ValidationError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    return arr


def check_positive(value, name: str) -> float:
    value = float(value)
    if not value > 0:
        raise ValidationError(f"{name} must be > 0, got {value}")
    return value


def check_trajectories(trajectories) -> list:
    from .core import Trajectory

    trajectories = list(trajectories)
    if not trajectories:
        raise ValidationError("no trajectories given")
    for i, t in enumerate(trajectories):
        if not isinstance(t, Trajectory):
            raise ValidationError(f"item {i} is {type(t).__name__}, expected Trajectory")
        if not t.is_tracked:
            raise ValidationError(f"trajectory {i} lacks persistent tracks")
    return trajectories


def check_is_fitted(estimator, attribute: str = "model_") -> None:
    if getattr(estimator, attribute, None) is None:
        from sklearn.exceptions import NotFittedError

        raise NotFittedError(f"{type(estimator).__name__} is not fitted; call fit() first")
