"""Point-cloud distances in meters: MDE, Chamfer, EMD."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .validation import check_cloud

MAX_EMD_POINTS = 512


def mde(pred, truth) -> float:
    pred, truth = check_cloud(pred), check_cloud(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"mde needs corresponding clouds, got {pred.shape} and {truth.shape}")
    return float(np.linalg.norm(pred - truth, axis=1).mean())


def nn_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from each point of ``a`` to its nearest point in ``b``."""
    if len(b) < 256:
        return np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)).min(axis=1)
    d, _ = cKDTree(b).query(a, k=1)
    return d


def chamfer(a, b) -> float:
    """Symmetric mean nearest-neighbor L2 distance."""
    a, b = check_cloud(a), check_cloud(b)
    return float(0.5 * (nn_distances(a, b).mean() + nn_distances(b, a).mean()))


def emd(a, b) -> float:
    """Mean matched distance under the optimal one-to-one assignment."""
    a, b = check_cloud(a), check_cloud(b)
    if len(a) != len(b):
        raise ValueError(f"emd needs equal-size clouds, got {len(a)} and {len(b)}")
    if len(a) > MAX_EMD_POINTS:
        raise ValueError(f"emd limited to {MAX_EMD_POINTS} points, got {len(a)}")
    cost = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


@dataclass
class MetricReport:
    per_clip: dict[str, list[float]] = field(default_factory=lambda: {"mde": [], "chamfer": [], "emd": []})

    def add(self, **values: float) -> None:
        for k, v in values.items():
            self.per_clip[k].append(float(v))

    def summary(self) -> dict:
        out = {}
        for k, vals in self.per_clip.items():
            arr = np.asarray(vals, dtype=float)
            out[k] = {
                "mean": float(arr.mean()) if arr.size else 0.0,
                "std": float(arr.std()) if arr.size else 0.0,
                "per_clip": [float(v) for v in arr],
            }
        return out
