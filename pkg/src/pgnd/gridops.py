"""Uniform grid, frame normalization, grid velocity editing and G2P transfer.

Editing and transfer functions accept either numpy arrays or graph tensors
for the quantities that carry gradients, so the same code serves the dense
single-scene API and the sparse, batched training pipeline.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorgrad as tg

MARGIN_NODES = 2
GROUND_EPS = 1e-10


class CapacityError(ValueError):
    """Particles do not fit inside the grid volume."""


@dataclass(frozen=True)
class Grid:
    l: int
    delta: float
    origin: np.ndarray = None  # world position of node (0,0,0)

    def __post_init__(self):
        if self.l < 2 or not self.delta > 0:
            raise ValueError("grid needs l >= 2 and delta > 0")
        origin = np.zeros(3) if self.origin is None else np.asarray(self.origin, dtype=float)
        object.__setattr__(self, "origin", origin)

    @property
    def extent(self) -> float:
        return (self.l - 1) * self.delta

    @property
    def center(self) -> np.ndarray:
        return np.full(3, 0.5 * self.extent)

    @property
    def num_nodes(self) -> int:
        return self.l**3

    def node_positions(self) -> np.ndarray:
        """Grid-frame node coordinates, node-major with z fastest."""
        k = np.arange(self.l) * self.delta
        gx, gy, gz = np.meshgrid(k, k, k, indexing="ij")
        return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)

    def linear_index(self, ijk: np.ndarray) -> np.ndarray:
        ijk = np.asarray(ijk)
        return (ijk[..., 0] * self.l + ijk[..., 1]) * self.l + ijk[..., 2]

    def unravel(self, index: np.ndarray) -> np.ndarray:
        index = np.asarray(index)
        return np.stack([index // (self.l * self.l), (index // self.l) % self.l, index % self.l], axis=-1)

    def zero_field(self) -> "GridField":
        return GridField(self, np.zeros((self.num_nodes, 3)), np.zeros(3))


@dataclass
class GridField:
    grid: Grid
    velocities: np.ndarray  # (l^3, 3)
    offset: np.ndarray

    def copy(self) -> "GridField":
        return GridField(self.grid, self.velocities.copy(), self.offset.copy())


@dataclass(frozen=True)
class GraspSpec:
    center: np.ndarray
    omega: np.ndarray
    velocity: np.ndarray
    radius: float = 0.1
    active: bool = True

    def __post_init__(self):
        if self.active and not self.radius > 0:
            raise ValueError("grasp radius must be > 0")


def check_fits(size: np.ndarray, grid: Grid) -> None:
    room = grid.extent - 2 * MARGIN_NODES * grid.delta
    if np.any(size > room):
        raise CapacityError(
            f"point cloud spans {np.round(size, 4).tolist()} m but grid {grid.l}x{grid.delta} m "
            f"leaves {room:.4f} m after margins; increase grid_l or grid_delta"
        )


def bbox_offset(points: np.ndarray, grid: Grid) -> np.ndarray:
    lo, hi = points.min(axis=0), points.max(axis=0)
    check_fits(hi - lo, grid)
    return grid.center - 0.5 * (hi + lo)


def normalize_to_grid(points, eef_positions, grid: Grid):
    """Translate a cloud (and end-effector positions) so its bbox is centered in the grid."""
    points = np.asarray(points, dtype=np.float64)
    offset = bbox_offset(points, grid)
    eef = None if eef_positions is None else np.asarray(eef_positions, dtype=np.float64) + offset
    return points + offset, eef, offset


# ---------------------------------------------------------------- B-spline


def bspline_weight_1d(u):
    """Quadratic B-spline kernel, ``u`` in cell units."""
    a = np.abs(np.asarray(u, dtype=np.float64))
    return np.where(a <= 0.5, 0.75 - a * a, np.where(a <= 1.5, 0.5 * (1.5 - a) ** 2, 0.0))


def stencil(grid_pos: np.ndarray, grid: Grid) -> np.ndarray:
    """Lower corner of each particle's 3x3x3 support, checked against the grid bounds."""
    base = np.floor(grid_pos / grid.delta - 0.5).astype(np.int64)
    if np.any(base < 0) or np.any(base + 2 > grid.l - 1):
        raise CapacityError("particle outside the grid support; increase grid_l or grid_delta")
    return base


_OFFSETS = np.array([(i, j, k) for i in range(3) for j in range(3) for k in range(3)])


def stencil_nodes(base: np.ndarray) -> np.ndarray:
    """(n, 27, 3) integer node coordinates of every particle's support."""
    return base[:, None, :] + _OFFSETS[None]


def g2p_weights(grid_pos, base: np.ndarray, delta: float):
    """Per-particle weights over the 27 support nodes, shape (n, 27).

    Works on arrays or tensors; gradients flow to ``grid_pos``.
    """
    fx = tg.sub(tg.mul(grid_pos, 1.0 / delta), base.astype(np.float64))
    w0 = tg.mul(tg.square(tg.sub(1.5, fx)), 0.5)
    w1 = tg.sub(0.75, tg.square(tg.sub(fx, 1.0)))
    w2 = tg.mul(tg.square(tg.sub(fx, 0.5)), 0.5)
    w = tg.concat([w0, w1, w2], axis=1)  # columns: stencil*3 + axis
    wx = w[:, _OFFSETS[:, 0] * 3 + 0]
    wy = w[:, _OFFSETS[:, 1] * 3 + 1]
    wz = w[:, _OFFSETS[:, 2] * 3 + 2]
    return tg.mul(tg.mul(wx, wy), wz)


def g2p_sparse(node_vel, node_rows: np.ndarray, weights) -> tg.Tensor:
    """Blend rows of ``node_vel`` (M, 3) picked by ``node_rows`` (n, 27)."""
    n = node_rows.shape[0]
    picked = tg.reshape(tg.gather(node_vel, node_rows.reshape(-1)), (n, 27, 3))
    return tg.tsum(tg.mul(picked, tg.reshape(weights, (n, 27, 1))), axis=1)


def g2p(field: GridField, particles) -> np.ndarray:
    """Interpolate a dense grid field at grid-frame particle positions."""
    particles = np.asarray(particles, dtype=np.float64)
    grid = field.grid
    base = stencil(particles, grid)
    rows = grid.linear_index(stencil_nodes(base))
    with tg.no_grad():
        w = g2p_weights(particles, base, grid.delta)
        return g2p_sparse(field.velocities, rows, w).data


# ---------------------------------------------------------------- velocity editing


def ground_contact(values, node_z: np.ndarray, ground: np.ndarray, delta: float, mu: float):
    """Project inward normal velocity to zero on contact-band nodes, with friction.

    ``node_z`` and ``ground`` are per-row arrays (ground may differ per scene).
    """
    values = tg.tensor(values)
    band = (node_z <= ground + delta).astype(np.float64)
    vz = values[:, 2:3]
    vt = values[:, 0:2]
    inward = tg.mul(tg.relu(tg.mul(vz, -1.0)), band[:, None])
    new_vz = tg.add(vz, inward)
    vt_norm = tg.sqrt(tg.add(tg.tsum(tg.square(vt), axis=1, keepdims=True), GROUND_EPS**2))
    scale = tg.relu(tg.sub(1.0, tg.div(tg.mul(inward, mu), tg.add(vt_norm, GROUND_EPS))))
    return tg.concat([tg.mul(vt, scale), new_vz], axis=1)


def cross_rows(w: np.ndarray, d):
    """Row-wise ``w x d`` with constant ``w``."""
    d = tg.tensor(d)
    a = tg.mul(d[:, [2, 0, 1]], w[:, [1, 2, 0]])
    b = tg.mul(d[:, [1, 2, 0]], w[:, [2, 0, 1]])
    return tg.sub(a, b)


def grasp_edit(values, node_pos: np.ndarray, center, omega: np.ndarray, velocity: np.ndarray,
               mask: np.ndarray):
    """Overwrite masked rows with the rigid gripper velocity field.

    ``center`` is per-row (array or tensor); ``omega``/``velocity`` per-row arrays.
    """
    m = mask.astype(np.float64)[:, None]
    target = tg.add(cross_rows(omega, tg.sub(node_pos, center)), velocity)
    return tg.add(tg.mul(values, 1.0 - m), tg.mul(target, m))


def gve_grasp(field: GridField, grasp: GraspSpec) -> GridField:
    if not grasp.active:
        return field.copy()
    nodes = field.grid.node_positions()
    center = np.asarray(grasp.center, dtype=float)
    mask = np.linalg.norm(nodes - center, axis=1) <= grasp.radius
    m = len(nodes)
    with tg.no_grad():
        out = grasp_edit(field.velocities, nodes, np.broadcast_to(center, (m, 3)),
                         np.broadcast_to(np.asarray(grasp.omega, float), (m, 3)),
                         np.broadcast_to(np.asarray(grasp.velocity, float), (m, 3)), mask).data
    return GridField(field.grid, out, field.offset.copy())


def gve_ground(field: GridField, ground_height: float, mu: float) -> GridField:
    """Ground editing on a dense field; ``ground_height`` is in the grid frame."""
    nodes = field.grid.node_positions()
    with tg.no_grad():
        out = ground_contact(field.velocities, nodes[:, 2], np.full(len(nodes), ground_height),
                             field.grid.delta, mu).data
    return GridField(field.grid, out, field.offset.copy())
