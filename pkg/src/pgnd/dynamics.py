"""Particle-grid dynamics: feature encoding, velocity field, editing, G2P, Euler rollout.

Batched evaluation stores several scenes as contiguous row segments of one
particle array (``offsets[b]:offsets[b+1]`` is scene ``b``). The grid field
is only evaluated on nodes inside some particle's B-spline support, which is
exactly the set of nodes G2P reads.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensorgrad as tg
from .core import GRASPED, NONPREHENSILE, Action, ParticleState, RunConfig
from .encoder import ModelParams, encode, encoder_inputs, field_forward, pooling_matrix, posenc
from .gridops import Grid, check_fits, g2p_sparse, g2p_weights, grasp_edit, ground_contact, stencil, stencil_nodes

MODES = ("grid", "particle")


class RolloutError(RuntimeError):
    def __init__(self, step: int, detail: str):
        super().__init__(f"rollout diverged at step {step}: {detail}")
        self.step = step


class DynamicsModel:
    def __init__(self, config: RunConfig | None = None, mode: str = "grid",
                 params: ModelParams | None = None, seed: int | None = None):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        self.config = config or RunConfig()
        self.mode = mode
        if params is None:
            rng = None if seed is None else np.random.default_rng(seed)
            params = ModelParams(self.config.history_h, self.config.feature_dim,
                                 self.config.pe_freqs, rng)
        self.params = params
        self.grid = Grid(self.config.grid_l, self.config.grid_delta)

    def parameters(self) -> list[tg.Tensor]:
        return self.params.parameters()


# ---------------------------------------------------------------- robot particles


def gripper_points(gripper_open: float = 0.04) -> np.ndarray:
    """32 points on two box fingers, gripper frame (fingers along -z, opening along y)."""
    pts = []
    for side in (-1.0, 1.0):
        cy = side * (0.5 * gripper_open + 0.005)
        for x in (-0.01, 0.01):
            for y in (cy - 0.005, cy + 0.005):
                for z in np.linspace(0.0, -0.04, 4):
                    pts.append((x, y, z))
    return np.array(pts)


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def robot_particles(action: Action) -> tuple[np.ndarray, np.ndarray]:
    """World positions and rigid-body velocities of all nonprehensile grippers."""
    pos, vel = [], []
    for arm in action.arms:
        if arm.action_type != NONPREHENSILE:
            continue
        p = gripper_points(arm.gripper_open) @ quat_to_matrix(arm.quaternion).T + arm.position
        v = np.cross(arm.omega, p - arm.position) + arm.linear_velocity
        pos.append(p)
        vel.append(v)
    if not pos:
        return np.zeros((0, 3)), np.zeros((0, 3))
    return np.concatenate(pos), np.concatenate(vel)


def augment_robot_particles(state: ParticleState, action: Action):
    """Object particles followed by gripper particles: (positions, velocity_history, tags)."""
    rp, rv = robot_particles(action)
    positions = np.concatenate([state.positions, rp])
    # gripper history is not carried by a single action; repeat the current twist
    rhist = np.broadcast_to(rv, (state.velocity_history.shape[0],) + rv.shape)
    history = np.concatenate([state.velocity_history, rhist], axis=1)
    tags = np.concatenate([np.zeros(state.n), np.ones(len(rp))])
    return positions, history, tags


# ---------------------------------------------------------------- batched pipeline


@dataclass
class _Augmented:
    positions: tg.Tensor
    history: list[tg.Tensor]
    tags: np.ndarray
    offsets: np.ndarray
    object_rows: np.ndarray  # rows of the augmented arrays that hold object particles


def _augment(positions: tg.Tensor, history: Sequence[tg.Tensor], offsets: np.ndarray,
             actions: Sequence[Action]) -> _Augmented:
    robots = [robot_particles(a) for a in actions]
    counts = np.array([len(r[0]) for r in robots])
    n = positions.shape[0]
    if counts.sum() == 0:
        return _Augmented(positions, list(history), np.zeros(n), offsets, np.arange(n))
    rpos = np.concatenate([r[0] for r in robots])
    rvel = np.concatenate([r[1] for r in robots])
    roff = np.concatenate([[0], np.cumsum(counts)])
    order, obj_rows, aug_off = [], [], [0]
    for b in range(len(offsets) - 1):
        obj = np.arange(offsets[b], offsets[b + 1])
        rob = n + np.arange(roff[b], roff[b + 1])
        obj_rows.append(len(order) + np.arange(len(obj)))
        order.extend(obj.tolist())
        order.extend(rob.tolist())
        aug_off.append(len(order))
    order = np.array(order)
    pos = tg.gather(tg.concat([positions, rpos], axis=0), order)
    hist = [tg.gather(tg.concat([v, rvel], axis=0), order) for v in history]
    tags = np.concatenate([np.zeros(n), np.ones(len(rpos))])[order]
    return _Augmented(pos, hist, tags, np.array(aug_off), np.concatenate(obj_rows))


def _segments(offsets: np.ndarray) -> np.ndarray:
    return np.repeat(np.arange(len(offsets) - 1), np.diff(offsets))


def predict_batch(model: DynamicsModel, positions, history: Sequence, offsets: np.ndarray,
                  actions: Sequence[Action]) -> tg.Tensor:
    """World-frame velocities (N, 3) for a batch of scenes; differentiable in all inputs."""
    cfg, grid = model.config, model.grid
    s = cfg.scale_s
    positions = tg.tensor(positions)
    history = [tg.tensor(v) for v in history]
    offsets = np.asarray(offsets)
    if len(actions) != len(offsets) - 1:
        raise ValueError("one action per scene required")
    aug = _augment(positions, history, offsets, actions)
    aug_seg = _segments(aug.offsets)
    obj_seg = _segments(offsets)

    hi = tg.segment_max(aug.positions, aug.offsets)
    lo = tg.segment_min(aug.positions, aug.offsets)
    check_fits(s * (hi.data - lo.data).max(axis=0), grid)
    center = tg.mul(tg.add(hi, lo), 0.5)  # (B, 3) world bbox centers
    gc = grid.center

    def to_grid(x, seg):
        return tg.add(tg.mul(tg.sub(x, tg.gather(center, seg)), s), gc)

    aug_grid = to_grid(aug.positions, aug_seg)
    # velocities enter and leave the networks in grid cells per step
    vscale = cfg.dt / grid.delta
    x_in = encoder_inputs(aug_grid, [tg.mul(v, s * vscale) for v in aug.history], aug.tags)
    feats = encode(x_in, aug.offsets, model.params)

    obj_grid = to_grid(positions, obj_seg)
    ground_grid = s * (cfg.ground_height - center.data[:, 2]) + gc[2]  # (B,)

    if model.mode == "grid":
        base = stencil(obj_grid.data, grid)
        lin = grid.linear_index(stencil_nodes(base))  # (N, 27)
        keys = obj_seg[:, None].astype(np.int64) * grid.num_nodes + lin
        active, inverse = np.unique(keys, return_inverse=True)
        node_rows = inverse.reshape(lin.shape)
        node_seg = active // grid.num_nodes
        node_pos = grid.unravel(active % grid.num_nodes) * grid.delta
        node_off = np.searchsorted(node_seg, np.arange(len(offsets)))
        pool, _ = pooling_matrix(node_pos, aug_grid.data, cfg.radius_r, node_off, aug.offsets)
        vel = field_forward(posenc(node_pos, cfg.pe_freqs), tg.spmm(pool, feats), model.params)
        vel = tg.mul(vel, 1.0 / vscale)
        vel = _edit(vel, node_pos, node_seg, center, actions, ground_grid, s, cfg, grid)
        weights = g2p_weights(obj_grid, base, grid.delta)
        out = g2p_sparse(vel, node_rows, weights)
    else:
        pool, _ = pooling_matrix(obj_grid.data, aug_grid.data, cfg.radius_r, offsets, aug.offsets)
        vel = field_forward(posenc(obj_grid, cfg.pe_freqs), tg.spmm(pool, feats), model.params)
        vel = tg.mul(vel, 1.0 / vscale)
        out = _edit(vel, obj_grid, obj_seg, center, actions, ground_grid, s, cfg, grid)
    return tg.mul(out, 1.0 / s)


def _edit(vel, where, seg: np.ndarray, center: tg.Tensor, actions: Sequence[Action],
          ground_grid: np.ndarray, s: float, cfg: RunConfig, grid: Grid):
    """Ground projection then grasp overwrite, per row of ``vel`` located at ``where``."""
    where_val = where.data if isinstance(where, tg.Tensor) else where
    vel = ground_contact(vel, where_val[:, 2], ground_grid[seg], grid.delta, cfg.friction_mu)
    narms = max(len(a.arms) for a in actions)
    for j in range(narms):
        grasped = np.array([j < len(a.arms) and a.arms[j].action_type == GRASPED for a in actions])
        if not grasped[seg].any():
            continue
        world = np.array([a.arms[j].position if g else np.zeros(3) for a, g in zip(actions, grasped)])
        omega = np.array([a.arms[j].omega if g else np.zeros(3) for a, g in zip(actions, grasped)])
        lin = np.array([a.arms[j].linear_velocity if g else np.zeros(3) for a, g in zip(actions, grasped)])
        # grasp center in the (scaled) grid frame, differentiable through the bbox center
        cgrid = tg.add(tg.mul(tg.sub(world, center), s), grid.center)
        crow = tg.gather(cgrid, seg)
        dist = np.linalg.norm(where_val - crow.data, axis=1)
        mask = grasped[seg] & (dist <= s * cfg.grasp_radius_a)
        if mask.any():
            vel = grasp_edit(vel, where, crow, omega[seg], s * lin[seg], mask)
    return vel


def step_batch(model: DynamicsModel, positions, history: Sequence, offsets, actions):
    v = predict_batch(model, positions, history, offsets, actions)
    new_pos = tg.add(positions, tg.mul(v, model.config.dt))
    return new_pos, list(history[1:]) + [v]


def rollout_batch(model: DynamicsModel, positions, history: Sequence, offsets,
                  actions_per_step: Sequence[Sequence[Action]]) -> list[tg.Tensor]:
    """Chain ``len(actions_per_step)`` Euler steps; returns predicted positions per step."""
    out = []
    pos = tg.tensor(positions)
    hist = [tg.tensor(v) for v in history]
    for k, actions in enumerate(actions_per_step):
        pos, hist = step_batch(model, pos, hist, offsets, actions)
        if not np.all(np.isfinite(pos.data)):
            raise RolloutError(k, "non-finite particle positions")
        out.append(pos)
    return out


# ---------------------------------------------------------------- single-scene API


def predict_velocity(state: ParticleState, action: Action, model: DynamicsModel) -> np.ndarray:
    with tg.no_grad():
        v = predict_batch(model, state.positions, list(state.velocity_history),
                          np.array([0, state.n]), [action])
    return v.data


def step(state: ParticleState, action: Action, model: DynamicsModel) -> ParticleState:
    v = predict_velocity(state, action, model)
    if not np.all(np.isfinite(v)):
        raise RolloutError(0, "non-finite velocity")
    hist = np.concatenate([state.velocity_history[1:], v[None]], axis=0)
    return ParticleState(state.positions + model.config.dt * v, hist, state.time + model.config.dt)


def rollout(state: ParticleState, actions: Sequence[Action], model: DynamicsModel) -> list[ParticleState]:
    if len(actions) < 1:
        raise ValueError("rollout needs at least one action")
    states = []
    for k, action in enumerate(actions):
        try:
            state = step(state, action, model)
        except RolloutError as exc:
            raise RolloutError(k, str(exc)) from None
        states.append(state)
    return states


def rollout_states(states: Sequence[ParticleState], actions: Sequence[Sequence[Action]],
                   model: DynamicsModel) -> np.ndarray:
    """No-grad batched rollout of several scenes with equal particle counts.

    ``actions[k][b]`` is scene ``b``'s action at step ``k``. Returns (K, B, n, 3).
    """
    n = states[0].n
    offsets = np.arange(len(states) + 1) * n
    pos = np.concatenate([s.positions for s in states])
    hist = [np.concatenate([s.velocity_history[i] for s in states]) for i in range(states[0].history + 1)]
    with tg.no_grad():
        traj = rollout_batch(model, pos, hist, offsets, actions)
    return np.stack([p.data.reshape(len(states), n, 3) for p in traj])
