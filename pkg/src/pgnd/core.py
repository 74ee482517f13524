"""Domain types, run configuration and the JSON-lines trajectory format."""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

GRASPED = 0
NONPREHENSILE = 1


class FormatError(ValueError):
    """Malformed trajectory or config file."""


class ValidationError(ValueError):
    """Input data that parses but violates a value constraint (NaN, negative sizes...)."""


class ParameterError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    grid_l: int = 50
    grid_delta: float = 0.02
    radius_r: float = 0.2
    history_h: int = 2
    horizon_K: int = 5
    dt: float = 0.1
    scale_s: float = 1.0
    grasp_radius_a: float = 0.1
    friction_mu: float = 0.5
    batch_size: int = 32
    seed: int = 0
    # extensions used by the training loop and the ground editor
    ground_height: float = 0.0
    feature_dim: int = 64
    pe_freqs: int = 6
    lr: float = 1e-4
    train_steps: int = 2000
    eval_every: int = 100
    lr_final_ratio: float = 1.0  # cosine decay to lr * ratio over the run; 1 keeps lr constant

    def __post_init__(self):
        if self.grid_l < 2:
            raise ParameterError("grid_l must be >= 2")
        for name in ("grid_delta", "radius_r", "dt", "scale_s", "grasp_radius_a"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be > 0")
        if self.history_h < 0 or self.horizon_K < 1:
            raise ParameterError("history_h must be >= 0 and horizon_K >= 1")
        if self.friction_mu < 0 or self.lr < 0:
            raise ParameterError("friction_mu and lr must be >= 0")
        if not 0 <= self.lr_final_ratio <= 1:
            raise ParameterError("lr_final_ratio must lie in [0, 1]")

    @property
    def window_length(self) -> int:
        return self.history_h + self.horizon_K + 1

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise FormatError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: {exc.msg} at byte {exc.pos}") from None
        if not isinstance(data, dict):
            raise FormatError(f"{path}: config must be a JSON object")
        return cls.from_dict(data)


@dataclass(frozen=True)
class EefCommand:
    """One arm's end-effector command.

    ``pose`` is ``[qw, qx, qy, qz, tx, ty, tz]`` and ``twist`` is
    ``[wx, wy, wz, vx, vy, vz]``; the twist is the motion over the coming
    interval.
    """

    action_type: int = GRASPED
    pose: np.ndarray = field(default_factory=lambda: np.array([1.0, 0, 0, 0, 0, 0, 0]))
    twist: np.ndarray = field(default_factory=lambda: np.zeros(6))
    gripper_open: float = 0.0

    def __post_init__(self):
        pose = np.asarray(self.pose, dtype=np.float64).reshape(7)
        twist = np.asarray(self.twist, dtype=np.float64).reshape(6)
        object.__setattr__(self, "pose", pose)
        object.__setattr__(self, "twist", twist)
        if self.action_type not in (GRASPED, NONPREHENSILE):
            raise ValidationError(f"action_type must be 0 or 1, got {self.action_type}")
        if not (np.all(np.isfinite(pose)) and np.all(np.isfinite(twist))):
            raise ValidationError("non-finite end-effector command")
        if abs(np.linalg.norm(pose[:4]) - 1.0) > 1e-9:
            raise ValidationError("end-effector quaternion is not unit norm")
        if self.gripper_open < 0:
            raise ValidationError("gripper_open must be >= 0")

    @property
    def position(self) -> np.ndarray:
        return self.pose[4:]

    @property
    def quaternion(self) -> np.ndarray:
        return self.pose[:4]

    @property
    def omega(self) -> np.ndarray:
        return self.twist[:3]

    @property
    def linear_velocity(self) -> np.ndarray:
        return self.twist[3:]

    def translated(self, delta) -> "EefCommand":
        pose = self.pose.copy()
        pose[4:] += delta
        return dataclasses.replace(self, pose=pose)


@dataclass(frozen=True)
class Action:
    arms: tuple[EefCommand, ...]

    def __post_init__(self):
        object.__setattr__(self, "arms", tuple(self.arms))
        if len(self.arms) not in (1, 2):
            raise ValidationError(f"arm count must be 1 or 2, got {len(self.arms)}")

    @property
    def action_type(self) -> int:
        return self.arms[0].action_type

    def translated(self, delta) -> "Action":
        return Action(tuple(a.translated(delta) for a in self.arms))

    @classmethod
    def single(cls, position, velocity=(0.0, 0.0, 0.0), omega=(0.0, 0.0, 0.0),
               action_type: int = GRASPED, gripper_open: float = 0.0) -> "Action":
        pose = np.concatenate([[1.0, 0.0, 0.0, 0.0], np.asarray(position, dtype=float)])
        twist = np.concatenate([np.asarray(omega, dtype=float), np.asarray(velocity, dtype=float)])
        return cls((EefCommand(action_type, pose, twist, gripper_open),))


@dataclass(frozen=True)
class ParticleState:
    positions: np.ndarray
    velocity_history: np.ndarray  # (h+1, n, 3), most recent last
    time: float = 0.0

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        vel = np.asarray(self.velocity_history, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3 or pos.shape[0] < 1:
            raise ValidationError(f"positions must be (n, 3) with n >= 1, got {pos.shape}")
        if vel.ndim != 3 or vel.shape[1:] != pos.shape:
            raise ValidationError(f"velocity_history must be (h+1, n, 3), got {vel.shape}")
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(vel))):
            raise ValidationError("non-finite particle state")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "velocity_history", vel)

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def history(self) -> int:
        return self.velocity_history.shape[0] - 1

    @classmethod
    def at_rest(cls, positions, h: int = 2, time: float = 0.0) -> "ParticleState":
        positions = np.asarray(positions, dtype=np.float64)
        return cls(positions, np.zeros((h + 1,) + positions.shape), time)

    @classmethod
    def from_frames(cls, frames: np.ndarray, dt: float, h: int, time: float = 0.0,
                    previous: np.ndarray | None = None) -> "ParticleState":
        """State at the last of ``h+1`` frames; velocities by finite differences.

        The oldest velocity uses ``previous`` (the frame before the first) when
        given, otherwise it is zero.
        """
        frames = np.asarray(frames, dtype=np.float64)
        if frames.shape[0] != h + 1:
            raise ValidationError(f"need {h + 1} frames, got {frames.shape[0]}")
        vel = np.zeros_like(frames)
        vel[1:] = np.diff(frames, axis=0) / dt
        if previous is not None:
            vel[0] = (frames[0] - previous) / dt
        return cls(frames[-1], vel, time)

    def subset(self, index) -> "ParticleState":
        return ParticleState(self.positions[index], self.velocity_history[:, index], self.time)

    def translated(self, delta) -> "ParticleState":
        return ParticleState(self.positions + np.asarray(delta), self.velocity_history, self.time)


@dataclass
class Trajectory:
    """Time-ordered point clouds with aligned actions.

    Frames share one particle count when the clouds are persistent tracks.
    """

    dt: float
    frames: list[np.ndarray]
    actions: list[Action]
    times: list[float] | None = None

    def __post_init__(self):
        if len(self.frames) != len(self.actions):
            raise ValidationError("frames and actions differ in length")
        if self.times is None:
            self.times = [i * self.dt for i in range(len(self.frames))]

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def is_tracked(self) -> bool:
        return len({f.shape[0] for f in self.frames}) <= 1

    def tracks(self) -> np.ndarray:
        if not self.is_tracked:
            raise ValidationError("frames do not share a particle count; extract tracks first")
        return np.stack(self.frames)


@dataclass(frozen=True)
class TrajectoryWindow:
    tracks: np.ndarray  # (h+K+1, n, 3)
    actions: tuple[Action, ...]
    first_frame_index: int
    previous_frame: np.ndarray | None = None  # frame before the window, None at episode start

    def initial_state(self, h: int, dt: float) -> ParticleState:
        return ParticleState.from_frames(
            self.tracks[: h + 1], dt, h, time=(self.first_frame_index + h) * dt,
            previous=self.previous_frame,
        )


def make_windows(traj: Trajectory, h: int, K: int) -> list[TrajectoryWindow]:
    """Stride-1 windows of ``h+K+1`` frames; history before frame 0 is zero velocity."""
    length = h + K + 1
    if len(traj) < length:
        return []
    tracks = traj.tracks()
    out = []
    for start in range(len(traj) - length + 1):
        out.append(
            TrajectoryWindow(
                tracks=tracks[start:start + length],
                actions=tuple(traj.actions[start:start + length]),
                first_frame_index=start,
                previous_frame=tracks[start - 1] if start > 0 else None,
            )
        )
    return out


def window_count(T: int, h: int, K: int) -> int:
    return max(0, T - (h + K + 1) + 1)


def scale_object(points, s: float) -> np.ndarray:
    """Scale a cloud about its centroid."""
    if not s > 0:
        raise ParameterError(f"scale must be > 0, got {s}")
    points = np.asarray(points, dtype=np.float64)
    if s == 1.0:
        return points.copy()
    c = points.mean(axis=0)
    return (points - c) * s + c


# ---------------------------------------------------------------- file format

FORMAT_VERSION = 1


def _action_to_json(action: Action) -> list[dict]:
    return [
        {
            "type": int(a.action_type),
            "pose": [float(v) for v in a.pose],
            "twist": [float(v) for v in a.twist],
            "open": float(a.gripper_open),
        }
        for a in action.arms
    ]


def _action_from_json(items: list) -> Action:
    return Action(
        tuple(
            EefCommand(int(it["type"]), np.array(it["pose"], dtype=float),
                       np.array(it["twist"], dtype=float), float(it["open"]))
            for it in items
        )
    )


def save_trajectory(traj: Trajectory, path) -> None:
    arms = len(traj.actions[0].arms) if traj.actions else 1
    n = int(traj.frames[0].shape[0]) if traj.frames else 0
    header = {"version": FORMAT_VERSION, "n": n, "dt": float(traj.dt), "arms": arms,
              "frames": len(traj.frames)}
    lines = [json.dumps(header)]
    for t, x, a in zip(traj.times, traj.frames, traj.actions):
        # repr round-trips float64 exactly
        lines.append(json.dumps({"t": float(t), "x": np.asarray(x).tolist(), "eef": _action_to_json(a)}))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_trajectory(path) -> Trajectory:
    raw = Path(path).read_bytes()
    if not raw.strip():
        raise FormatError(f"{path}: empty file (byte offset 0)")
    offset = 0
    lines = raw.split(b"\n")
    try:
        header = json.loads(lines[0])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: malformed header at byte offset {getattr(exc, 'pos', 0)}") from None
    required = ("version", "n", "dt", "arms", "frames")
    if not isinstance(header, dict) or any(k not in header for k in required):
        raise FormatError(f"{path}: header missing fields at byte offset 0")
    if header["version"] != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {header['version']} at byte offset 0")
    offset += len(lines[0]) + 1
    frames, actions, times = [], [], []
    for line in lines[1:]:
        if not line.strip():
            offset += len(line) + 1
            continue
        try:
            rec = json.loads(line)
            x = np.array(rec["x"], dtype=np.float64).reshape(-1, 3)
            action = _action_from_json(rec["eef"])
            t = float(rec["t"])
        except ValidationError as exc:
            raise ValidationError(f"{path}: {exc} (byte offset {offset})") from None
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: malformed frame at byte offset {offset}: {exc}") from None
        if not np.all(np.isfinite(x)) or not math.isfinite(t):
            raise ValidationError(f"{path}: non-finite value in frame at byte offset {offset}")
        frames.append(x)
        actions.append(action)
        times.append(t)
        offset += len(line) + 1
    if len(frames) != header["frames"]:
        raise FormatError(f"{path}: header promises {header['frames']} frames, found {len(frames)}")
    return Trajectory(float(header["dt"]), frames, actions, times)


def load_dataset(directory) -> list[Trajectory]:
    directory = Path(directory)
    if directory.is_file():
        return [load_trajectory(directory)]
    return [load_trajectory(p) for p in sorted(directory.glob("*.jsonl"))]


def split_clips(traj: Trajectory, length: int, stride: int | None = None) -> list[Trajectory]:
    """Cut a long recording into clips of ``length`` frames (non-overlapping by default)."""
    stride = length if stride is None else stride
    out = []
    for start in range(0, len(traj) - length + 1, stride):
        out.append(Trajectory(traj.dt, traj.frames[start:start + length],
                              traj.actions[start:start + length],
                              traj.times[start:start + length]))
    return out
