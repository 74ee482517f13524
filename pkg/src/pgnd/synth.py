"""Mass-spring ground-truth world: rope/cloth oracle, scripted grippers, cameras, tracking."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.spatial import cKDTree

from .core import GRASPED, Action, EefCommand, Trajectory, save_trajectory

GRAVITY = np.array([0.0, 0.0, -9.81])
MAX_SPEED = 100.0


class SimulationBlowUp(RuntimeError):
    pass


class TrackingError(RuntimeError):
    pass


@dataclass
class OracleScene:
    kind: str
    positions: np.ndarray
    velocities: np.ndarray
    springs: np.ndarray  # (S, 2) particle index pairs
    rest: np.ndarray  # (S,) rest lengths
    stiffness: np.ndarray  # (S,) N/m
    mass: float = 0.002
    damping: float = 0.2  # dashpot along each spring, N s/m
    drag: float = 0.002  # linear air drag, N s/m
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY.copy())
    ground_height: float | None = 0.0
    friction: float = 0.5
    dt_sim: float = 1e-3
    pinned: dict = field(default_factory=dict)  # gripper id -> (indices, offsets in gripper frame)
    time: float = 0.0

    @property
    def n(self) -> int:
        return len(self.positions)

    def copy(self) -> "OracleScene":
        return OracleScene(
            self.kind, self.positions.copy(), self.velocities.copy(), self.springs.copy(),
            self.rest.copy(), self.stiffness.copy(), self.mass, self.damping, self.drag,
            self.gravity.copy(), self.ground_height, self.friction, self.dt_sim,
            {k: (i.copy(), o.copy()) for k, (i, o) in self.pinned.items()}, self.time,
        )

    def check_stable(self) -> None:
        ratio = self.stiffness.max() * self.dt_sim**2 / self.mass
        if ratio > 0.25 * (1 + 1e-9):
            raise ValueError(f"k*dt^2/m = {ratio:.3f} exceeds 0.25; reduce dt_sim or stiffness")

    def pin(self, gripper: int, indices, gripper_pose: "GripperPose") -> None:
        indices = np.asarray(indices, dtype=np.int64)
        local = (self.positions[indices] - gripper_pose.position) @ gripper_pose.rotation
        self.pinned[gripper] = (indices, local)

    def momentum(self) -> np.ndarray:
        return self.mass * self.velocities.sum(axis=0)


@dataclass(frozen=True)
class GripperPose:
    position: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    omega: np.ndarray = field(default_factory=lambda: np.zeros(3))


def _chain(n: int, spacing: float, k_stretch: float, k_bend: float, positions: np.ndarray):
    i = np.arange(n - 1)
    stretch = np.stack([i, i + 1], 1)
    j = np.arange(n - 2)
    bend = np.stack([j, j + 2], 1)
    springs = np.concatenate([stretch, bend])
    k = np.concatenate([np.full(len(stretch), k_stretch), np.full(len(bend), k_bend)])
    rest = np.linalg.norm(positions[springs[:, 0]] - positions[springs[:, 1]], axis=1)
    return springs, rest, k


def make_rope(n: int = 64, spacing: float = 0.01, k_stretch: float = 500.0, k_bend: float = 10.0,
              mass: float = 0.002, curvature: float = 0.0, rng: np.random.Generator | None = None,
              heading: float = 0.0, ground_height: float = 0.0) -> OracleScene:
    """Rope lying on the ground; ``curvature`` is the std of per-segment turning (rad)."""
    turns = np.zeros(n - 1)
    if curvature > 0 and rng is not None:
        turns = rng.normal(0.0, curvature, n - 1)
        turns = np.convolve(turns, np.ones(8) / 8, mode="same")
    theta = heading + np.cumsum(turns)
    steps = spacing * np.stack([np.cos(theta), np.sin(theta), np.zeros(n - 1)], 1)
    pos = np.concatenate([np.zeros((1, 3)), np.cumsum(steps, axis=0)])
    pos -= pos.mean(axis=0)
    pos[:, 2] = ground_height
    springs, rest, k = _chain(n, spacing, k_stretch, k_bend, pos)
    return OracleScene("rope", pos, np.zeros_like(pos), springs, rest, k, mass=mass,
                       ground_height=ground_height)


def make_cloth(side: int = 16, spacing: float = 0.02, k_struct: float = 400.0, k_shear: float = 200.0,
               k_bend: float = 20.0, mass: float = 0.002, ground_height: float = 0.0) -> OracleScene:
    idx = np.arange(side * side).reshape(side, side)
    g = np.arange(side) * spacing
    gx, gy = np.meshgrid(g, g, indexing="ij")
    pos = np.stack([gx.ravel(), gy.ravel(), np.full(side * side, ground_height)], 1)
    pos[:, :2] -= pos[:, :2].mean(axis=0)
    groups = [
        (np.stack([idx[:-1, :].ravel(), idx[1:, :].ravel()], 1), k_struct),
        (np.stack([idx[:, :-1].ravel(), idx[:, 1:].ravel()], 1), k_struct),
        (np.stack([idx[:-1, :-1].ravel(), idx[1:, 1:].ravel()], 1), k_shear),
        (np.stack([idx[1:, :-1].ravel(), idx[:-1, 1:].ravel()], 1), k_shear),
        (np.stack([idx[:-2, :].ravel(), idx[2:, :].ravel()], 1), k_bend),
        (np.stack([idx[:, :-2].ravel(), idx[:, 2:].ravel()], 1), k_bend),
    ]
    springs = np.concatenate([s for s, _ in groups])
    k = np.concatenate([np.full(len(s), kk) for s, kk in groups])
    rest = np.linalg.norm(pos[springs[:, 0]] - pos[springs[:, 1]], axis=1)
    return OracleScene("cloth", pos, np.zeros_like(pos), springs, rest, k, mass=mass,
                       ground_height=ground_height)


def spring_forces(scene: OracleScene) -> np.ndarray:
    i, j = scene.springs[:, 0], scene.springs[:, 1]
    d = scene.positions[j] - scene.positions[i]
    length = np.linalg.norm(d, axis=1)
    u = d / np.maximum(length, 1e-12)[:, None]
    rel = np.einsum("ij,ij->i", scene.velocities[j] - scene.velocities[i], u)
    mag = scene.stiffness * (length - scene.rest) + scene.damping * rel
    f = mag[:, None] * u
    out = np.zeros_like(scene.positions)
    np.add.at(out, i, f)
    np.add.at(out, j, -f)
    return out


def oracle_step(scene: OracleScene, grippers: dict[int, GripperPose] | None = None,
                dt_sim: float | None = None) -> OracleScene:
    """One semi-implicit Euler substep, in place. ``grippers`` are poses at the end of the substep."""
    dt = scene.dt_sim if dt_sim is None else dt_sim
    force = spring_forces(scene) + scene.mass * scene.gravity - scene.drag * scene.velocities
    scene.velocities = scene.velocities + dt * force / scene.mass
    scene.positions = scene.positions + dt * scene.velocities
    if scene.ground_height is not None:
        below = scene.positions[:, 2] < scene.ground_height
        if below.any():
            v = scene.velocities[below]
            vn = np.minimum(v[:, 2], 0.0)
            vt = v[:, :2]
            speed = np.linalg.norm(vt, axis=1)
            scale = np.maximum(0.0, 1.0 - scene.friction * np.abs(vn) / np.maximum(speed, 1e-12))
            v[:, :2] = vt * scale[:, None]
            v[:, 2] = v[:, 2] - vn
            scene.velocities[below] = v
            scene.positions[below, 2] = scene.ground_height
    for gid, (idx, local) in scene.pinned.items():
        if grippers is None or gid not in grippers:
            continue
        g = grippers[gid]
        arm = local @ g.rotation.T
        scene.positions[idx] = g.position + arm
        scene.velocities[idx] = g.velocity + np.cross(g.omega, arm)
    scene.time += dt
    if not np.all(np.isfinite(scene.velocities)) or np.abs(scene.velocities).max() > MAX_SPEED:
        raise SimulationBlowUp(f"{scene.kind} oracle diverged at t={scene.time:.4f} s")
    return scene


# ---------------------------------------------------------------- scripted grippers


@dataclass
class GripperScript:
    """Smooth gripper path through timed waypoints (translation only)."""

    times: np.ndarray
    waypoints: np.ndarray

    def __post_init__(self):
        self._spline = CubicSpline(self.times, self.waypoints, bc_type="clamped")

    def position(self, t: float) -> np.ndarray:
        t = float(np.clip(t, self.times[0], self.times[-1]))
        return self._spline(t)

    def pose(self, t: float, dt: float) -> GripperPose:
        p0, p1 = self.position(t), self.position(t + dt)
        return GripperPose(p1, velocity=(p1 - p0) / dt)


def random_script(start: np.ndarray, duration: float, rng: np.random.Generator,
                  reach: float = 0.15, max_height: float = 0.25, ground: float = 0.0,
                  segment: float = 1.0) -> GripperScript:
    count = max(1, int(round(duration / segment)))
    times = np.linspace(0.0, duration, count + 1)
    pts = [np.asarray(start, dtype=float)]
    for _ in range(count):
        prev = pts[-1]
        nxt = prev + np.array([rng.uniform(-reach, reach), rng.uniform(-reach, reach), 0.0])
        nxt[2] = ground + rng.uniform(0.0, max_height)
        pts.append(nxt)
    return GripperScript(times, np.array(pts))


def linear_script(start, end, duration: float) -> GripperScript:
    return GripperScript(np.array([0.0, duration]), np.array([start, end], dtype=float))


# ---------------------------------------------------------------- trajectories


def _action(script: GripperScript, t: float, dt: float) -> Action:
    p0, p1 = script.position(t), script.position(t + dt)
    pose = np.concatenate([[1.0, 0.0, 0.0, 0.0], p0])
    twist = np.concatenate([np.zeros(3), (p1 - p0) / dt])
    return Action((EefCommand(GRASPED, pose, twist, 0.0),))


def simulate(scene: OracleScene, script: GripperScript, duration: float, dt: float):
    """Advance the oracle, returning frame positions and per-frame forward-difference velocities."""
    ratio = duration / dt
    if abs(ratio - round(ratio)) > 1e-9:
        raise ValueError(f"duration {duration} is not a multiple of dt {dt}")
    substeps = int(round(dt / scene.dt_sim))
    if substeps < 10:
        raise ValueError("oracle dt_sim must be at most dt/10")
    scene.check_stable()
    nframes = int(round(ratio)) + 1
    frames = [scene.positions.copy()]
    actions = [_action(script, 0.0, dt)]
    for f in range(1, nframes):
        t0 = (f - 1) * dt
        for s in range(1, substeps + 1):
            scene = oracle_step(scene, {0: script.pose(t0 + s * scene.dt_sim - scene.dt_sim, scene.dt_sim)})
        frames.append(scene.positions.copy())
        actions.append(_action(script, f * dt, dt))
    return frames, actions


def gen_trajectory(scene: OracleScene, script: GripperScript, duration: float, dt: float,
                   path=None) -> Trajectory:
    frames, actions = simulate(scene, script, duration, dt)
    traj = Trajectory(dt, frames, actions)
    if path is not None:
        save_trajectory(traj, path)
    return traj


def rope_episode(seed: int, duration: float = 3.0, dt: float = 0.1, n: int = 64,
                 curvature: float = 0.08) -> tuple[OracleScene, GripperScript]:
    """Randomized rope-on-ground scene with one end grasped and a random smooth gripper path."""
    rng = np.random.default_rng(seed)
    scene = make_rope(n=n, curvature=curvature, rng=rng, heading=rng.uniform(0, 2 * np.pi))
    start = scene.positions[0].copy()
    script = random_script(start, duration + dt, rng)
    scene.pin(0, [0, 1], GripperPose(start))
    return scene, script


def cloth_episode(seed: int, duration: float = 3.0, dt: float = 0.1, side: int = 16):
    rng = np.random.default_rng(seed)
    scene = make_cloth(side=side)
    corner = scene.positions[0].copy()
    script = random_script(corner, duration + dt, rng, reach=0.1, max_height=0.2)
    scene.pin(0, [0], GripperPose(corner))
    return scene, script


def generate(kind: str, seed: int, duration: float = 3.0, dt: float = 0.1, path=None) -> Trajectory:
    if kind == "rope":
        scene, script = rope_episode(seed, duration, dt)
    elif kind == "cloth":
        scene, script = cloth_episode(seed, duration, dt)
    else:
        raise ValueError(f"unknown object kind {kind!r}")
    return gen_trajectory(scene, script, duration, dt, path)


def frame_velocities(frames: list[np.ndarray], dt: float) -> list[np.ndarray]:
    """Forward-difference velocities per frame; the last frame repeats the previous one."""
    vel = [(b - a) / dt for a, b in zip(frames[:-1], frames[1:])]
    vel.append(vel[-1] if vel else np.zeros_like(frames[0]))
    return vel


# ---------------------------------------------------------------- cameras


@dataclass(frozen=True)
class CameraSpec:
    position: np.ndarray
    look_at: np.ndarray
    focal: float = 55.0
    resolution: int = 64

    def __post_init__(self):
        if not self.focal > 0 or self.resolution < 1:
            raise ValueError("camera needs positive focal length and resolution")

    def frame(self) -> np.ndarray:
        """Rows are camera right, down, forward in world coordinates."""
        fwd = np.asarray(self.look_at, float) - np.asarray(self.position, float)
        fwd /= np.linalg.norm(fwd)
        up = np.array([0.0, 0.0, 1.0])
        right = np.cross(fwd, up)
        if np.linalg.norm(right) < 1e-9:
            right = np.array([1.0, 0.0, 0.0])
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        return np.stack([right, down, fwd])

    def project(self, points: np.ndarray):
        cam = (points - np.asarray(self.position, float)) @ self.frame().T
        depth = cam[:, 2]
        c = 0.5 * self.resolution
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.focal * cam[:, 0] / depth + c
            v = self.focal * cam[:, 1] / depth + c
        return u, v, depth

    def to_dict(self) -> dict:
        return {"position": list(map(float, self.position)), "look_at": list(map(float, self.look_at)),
                "focal": self.focal, "resolution": self.resolution}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraSpec":
        return cls(np.array(d["position"], float), np.array(d["look_at"], float),
                   float(d.get("focal", 55.0)), int(d.get("resolution", 64)))


def default_cameras(center=(0.0, 0.0, 0.0), distance: float = 1.0, height: float = 0.8) -> list[CameraSpec]:
    """Four cameras at the corners of the table, looking at ``center``."""
    center = np.asarray(center, dtype=float)
    cams = []
    for ang in np.deg2rad([45.0, 135.0, 225.0, 315.0]):
        pos = center + np.array([distance * np.cos(ang), distance * np.sin(ang), height])
        cams.append(CameraSpec(pos, center.copy()))
    return cams


def visible_mask(points: np.ndarray, cameras: list[CameraSpec], tol: float = 0.01) -> np.ndarray:
    """Z-buffer visibility: a point survives if some camera sees it within ``tol`` of the cell's nearest depth."""
    if len(cameras) < 1:
        raise ValueError("need at least one camera")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    keep = np.zeros(len(points), dtype=bool)
    if len(points) == 0:
        return keep
    for cam in cameras:
        u, v, depth = cam.project(points)
        res = cam.resolution
        ok = (depth > 1e-6) & (u >= 0) & (u < res) & (v >= 0) & (v < res)
        if not ok.any():
            continue
        cell = np.full(len(points), -1, dtype=np.int64)
        cell[ok] = np.floor(v[ok]).astype(np.int64) * res + np.floor(u[ok]).astype(np.int64)
        zbuf = np.full(res * res, np.inf)
        np.minimum.at(zbuf, cell[ok], depth[ok])
        seen = np.zeros(len(points), dtype=bool)
        seen[ok] = depth[ok] <= zbuf[cell[ok]] + tol
        keep |= seen
    return keep


def mask_partial_view(points, cameras: list[CameraSpec], tol: float = 0.01) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return points[visible_mask(points, cameras, tol)]


def choose_cameras(n_views: int, rng: np.random.Generator, cameras: list[CameraSpec] | None = None,
                   center=(0.0, 0.0, 0.0)) -> list[CameraSpec]:
    cameras = cameras or default_cameras(center)
    if not 1 <= n_views <= len(cameras):
        raise ValueError(f"views must be in 1..{len(cameras)}")
    pick = rng.choice(len(cameras), size=n_views, replace=False)
    return [cameras[i] for i in sorted(pick)]


# ---------------------------------------------------------------- tracking


def voxel_downsample(points: np.ndarray, voxel: float) -> np.ndarray:
    """Indices of the first point falling in each occupied voxel, in input order."""
    keys = np.floor(points / voxel).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    return np.sort(first)


def extract_tracks(frames: list[np.ndarray], velocities: list[np.ndarray], dt: float,
                   k: int = 5, voxel: float | None = None) -> np.ndarray:
    """Persistent tracks by iterative rollout with k-NN velocity lookup.

    Seeds are frame-0 points (voxel-downsampled when ``voxel`` is given).
    Returns (T, n_seeds, 3).
    """
    if len(frames) < 2:
        raise TrackingError("need at least two frames")
    for f, pts in enumerate(frames):
        if len(pts) == 0:
            raise TrackingError(f"empty observation at frame {f}")
    seeds = frames[0] if voxel is None else frames[0][voxel_downsample(frames[0], voxel)]

    def knn_velocity(f: int, query: np.ndarray) -> np.ndarray:
        kk = min(k, len(frames[f]))
        _, idx = cKDTree(frames[f]).query(query, k=kk)
        idx = np.asarray(idx).reshape(len(query), kk)
        return velocities[f][idx].mean(axis=1)

    tracks = [np.array(seeds, dtype=np.float64)]
    vel = knn_velocity(0, tracks[0])
    for f in range(1, len(frames)):
        tracks.append(tracks[-1] + dt * vel)
        vel = knn_velocity(f, tracks[-1])
    return np.stack(tracks)


def observe_tracks(traj: Trajectory, cameras: list[CameraSpec], k: int = 5,
                   voxel: float | None = 0.02, jitter: float = 0.0,
                   rng: np.random.Generator | None = None) -> Trajectory:
    """Partial-view observation of an oracle trajectory followed by track extraction."""
    truth = traj.tracks()
    vel = frame_velocities(list(truth), traj.dt)
    obs, obs_vel = [], []
    for x, v in zip(truth, vel):
        keep = visible_mask(x, cameras)
        pts = x[keep]
        if jitter > 0:
            rng = rng or np.random.default_rng(0)
            pts = pts + rng.normal(0.0, jitter, pts.shape)
        obs.append(pts)
        obs_vel.append(v[keep])
    tracks = extract_tracks(obs, obs_vel, traj.dt, k=k, voxel=voxel)
    return Trajectory(traj.dt, list(tracks), list(traj.actions), list(traj.times))
