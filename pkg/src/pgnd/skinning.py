"""Per-particle rotation estimation and linear blend skinning of kernel poses."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .validation import check_cloud


class DegenerateNeighborhood(UserWarning):
    pass


@dataclass
class KernelSet:
    centers: np.ndarray  # (K, 3)
    quats: np.ndarray  # (K, 4) as w, x, y, z
    extra: object = None  # scale, color, opacity: passed through untouched

    def __post_init__(self):
        self.centers = check_cloud(self.centers, "kernel centers")
        self.quats = np.asarray(self.quats, dtype=np.float64).reshape(-1, 4)
        if len(self.quats) != len(self.centers):
            raise ValueError("centers and quats differ in count")
        if np.any(np.abs(np.linalg.norm(self.quats, axis=1) - 1.0) > 1e-9):
            raise ValueError("kernel quaternions must be unit norm")

    def to_dict(self) -> dict:
        return {"centers": self.centers.tolist(), "quats": self.quats.tolist(), "extra": self.extra}

    @classmethod
    def from_dict(cls, d: dict) -> "KernelSet":
        return cls(np.array(d["centers"], float), np.array(d["quats"], float), d.get("extra"))

    @classmethod
    def load(cls, path) -> "KernelSet":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")


@dataclass
class ParticleRotations:
    matrices: np.ndarray  # (n, 3, 3)
    degenerate: np.ndarray = field(default=None)  # (n,) bool

    def quaternions(self) -> np.ndarray:
        return matrix_to_quat(self.matrices)


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    xyzw = Rotation.from_matrix(m).as_quat()
    return np.concatenate([xyzw[..., 3:], xyzw[..., :3]], axis=-1)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def kabsch(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Batched proper rotation R minimizing sum ||R src_i - dst_i||^2; inputs (..., m, 3)."""
    H = np.einsum("...mi,...mj->...ij", src, dst)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(np.swapaxes(Vt, -1, -2) @ np.swapaxes(U, -1, -2)))
    D = np.zeros(H.shape)
    D[..., 0, 0] = 1.0
    D[..., 1, 1] = 1.0
    D[..., 2, 2] = np.where(d == 0, 1.0, d)
    return np.swapaxes(Vt, -1, -2) @ D @ np.swapaxes(U, -1, -2)


def estimate_rotations(x_prev, x_next, k_rot: int = 8) -> ParticleRotations:
    """Local rotation of every particle from the motion of its ``k_rot`` nearest neighbors.

    Neighbors are searched in ``x_next``. The rotation maps previous offsets onto
    next offsets; neighborhoods with rank < 2 fall back to the identity.
    """
    x_prev, x_next = check_cloud(x_prev), check_cloud(x_next)
    n = len(x_prev)
    if x_next.shape != x_prev.shape:
        raise ValueError("x_prev and x_next must correspond")
    if n <= k_rot:
        raise ValueError(f"need more than k_rot={k_rot} particles, got {n}")
    _, idx = cKDTree(x_next).query(x_next, k=k_rot + 1)
    nbr = idx[:, 1:]
    src = x_prev[nbr] - x_prev[:, None, :]
    dst = x_next[nbr] - x_next[:, None, :]
    R = kabsch(src, dst)
    s = np.linalg.svd(src, compute_uv=False)  # (n, 3)
    degenerate = s[:, 1] <= 1e-9 * np.maximum(s[:, 0], 1e-300)
    if degenerate.any():
        warnings.warn(f"{int(degenerate.sum())} collinear neighborhoods; using identity rotation",
                      DegenerateNeighborhood, stacklevel=2)
        R[degenerate] = np.eye(3)
    return ParticleRotations(R, degenerate)


def lbs_weights(center, particles, k_lbs: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Inverse-distance weights over the ``k_lbs`` nearest particles of one or many centers."""
    particles = check_cloud(particles, "particles")
    centers = np.atleast_2d(np.asarray(center, dtype=np.float64))
    if len(particles) < k_lbs:
        raise ValueError(f"need at least k_lbs={k_lbs} particles")
    dist, idx = cKDTree(particles).query(centers, k=k_lbs)
    dist = np.asarray(dist).reshape(len(centers), k_lbs)
    idx = np.asarray(idx).reshape(len(centers), k_lbs)
    hit = dist <= 0.0
    with np.errstate(divide="ignore"):
        inv = np.where(hit, 0.0, 1.0 / dist)
    w = inv / inv.sum(axis=1, keepdims=True)
    rows = hit.any(axis=1)
    if rows.any():
        first = np.argmax(hit[rows], axis=1)
        w[rows] = 0.0
        w[np.flatnonzero(rows), first] = 1.0
    if np.ndim(center) == 1:
        return idx[0], w[0]
    return idx, w


def blend_quaternions(quats: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Weighted sum of (..., k, 4) quaternions, each sign-aligned to the first, renormalized."""
    sign = np.sign(np.einsum("...kq,...q->...k", quats, quats[..., 0, :]))
    sign = np.where(sign == 0, 1.0, sign)
    blended = np.einsum("...k,...kq->...q", weights * sign, quats)
    return blended / np.linalg.norm(blended, axis=-1, keepdims=True)


def lbs_apply(kernels: KernelSet, x_prev, x_next, rotations: ParticleRotations | None = None,
              k_lbs: int = 8, k_rot: int = 8) -> KernelSet:
    """Move kernel centers and orientations with the particle motion ``x_prev -> x_next``."""
    x_prev, x_next = check_cloud(x_prev), check_cloud(x_next)
    if rotations is None:
        rotations = estimate_rotations(x_prev, x_next, k_rot)
    idx, w = lbs_weights(kernels.centers, x_prev, k_lbs)
    R = rotations.matrices[idx]  # (K, k, 3, 3)
    local = kernels.centers[:, None, :] - x_prev[idx]
    moved = np.einsum("kpij,kpj->kpi", R, local) + x_prev[idx] + (x_next[idx] - x_prev[idx])
    centers = np.einsum("kp,kpi->ki", w, moved)
    q = blend_quaternions(rotations.quaternions()[idx], w)
    quats = quat_multiply(q, kernels.quats)
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    return KernelSet(centers, quats, kernels.extra)


def skin_sequence(kernels: KernelSet, frames, k_lbs: int = 8, k_rot: int = 8) -> list[KernelSet]:
    """Kernel sets for every frame, starting with the input set at frame 0."""
    out = [kernels]
    for prev, nxt in zip(frames[:-1], frames[1:]):
        out.append(lbs_apply(out[-1], prev, nxt, k_lbs=k_lbs, k_rot=k_rot))
    return out
