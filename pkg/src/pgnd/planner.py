"""MPPI over end-effector waypoints with a Chamfer-to-target cost, plus the closed MPC loop."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .core import GRASPED, Action, EefCommand, ParticleState
from .dynamics import DynamicsModel, RolloutError
from .gridops import CapacityError
from .metrics import chamfer
from .synth import GripperPose, OracleScene, linear_script, make_rope, oracle_step, simulate
from .train import rollout_clips

GRIPPER_PENALTY = 1e3

# predictor(state, per-sample action sequences) -> per-sample (T, n, 3) predicted positions
Predictor = Callable[[ParticleState, Sequence[Sequence[Action]]], Sequence[np.ndarray]]


class PlanningError(RuntimeError):
    pass


@dataclass
class PlanProblem:
    initial: ParticleState
    target: np.ndarray
    eef_positions: np.ndarray  # (arms, 3) current gripper positions
    horizon: int = 5
    rotations: bool = False  # 6 DoF per arm when True, else 3
    gripper_limit: float | None = None  # meters, bimanual only
    dt: float = 0.1
    eef_quats: np.ndarray | None = None  # (arms, 4) w, x, y, z

    def __post_init__(self):
        self.eef_positions = np.atleast_2d(np.asarray(self.eef_positions, dtype=float))
        if self.horizon < 1:
            raise ValueError("planning horizon must be >= 1")
        if self.gripper_limit is not None and not self.gripper_limit > 0:
            raise ValueError("gripper limit must be > 0")
        if self.eef_quats is None:
            self.eef_quats = np.tile([1.0, 0.0, 0.0, 0.0], (self.arms, 1))

    @property
    def arms(self) -> int:
        return len(self.eef_positions)

    @property
    def dof_per_arm(self) -> int:
        return 6 if self.rotations else 3

    @property
    def dof(self) -> int:
        return self.arms * self.dof_per_arm

    def hold(self) -> np.ndarray:
        """Nominal that keeps every gripper where it is: (horizon, dof)."""
        row = np.concatenate([np.concatenate([p, np.zeros(3)]) if self.rotations else p
                              for p in self.eef_positions])
        return np.tile(row, (self.horizon, 1))


@dataclass
class MppiConfig:
    samples: int = 64
    sigma: np.ndarray | float = 0.02  # per-DoF std (m for translation, rad for rotation)
    beta: float = 0.05
    iterations: int = 10
    seed: int = 0
    sigma_rot: float = 0.05

    def __post_init__(self):
        if self.samples < 2:
            raise ValueError("MPPI needs at least 2 samples")
        if not self.beta > 0:
            raise ValueError("temperature must be > 0")
        if np.any(np.asarray(self.sigma) < 0):
            raise ValueError("sigma must be non-negative")

    def sigma_vector(self, problem: PlanProblem) -> np.ndarray:
        if np.ndim(self.sigma) == 1:
            sig = np.asarray(self.sigma, dtype=float)
            if sig.shape != (problem.dof,):
                raise ValueError(f"sigma needs {problem.dof} entries")
            return sig
        per_arm = [float(self.sigma)] * 3 + ([self.sigma_rot] * 3 if problem.rotations else [])
        return np.tile(per_arm, problem.arms)


def sample_action_trajectories(nominal: np.ndarray, sigma: np.ndarray, samples: int,
                               rng: np.random.Generator) -> np.ndarray:
    """``samples`` trajectories ``nominal[t] + (t+1) * delta`` with one Gaussian delta per sample."""
    T, D = nominal.shape
    delta = rng.normal(size=(samples, D)) * sigma
    ramp = np.arange(1, T + 1)[None, :, None]
    return nominal[None] + ramp * delta[:, None, :]


def to_actions(traj: np.ndarray, problem: PlanProblem) -> list[Action]:
    """Waypoint trajectory (T, dof) -> T actions, each with the twist reaching the next waypoint."""
    dt = problem.dt
    k = problem.dof_per_arm
    actions = []
    prev_pos = problem.eef_positions.copy()
    base_rot = [Rotation.from_quat(np.roll(q, -1)) for q in problem.eef_quats]
    prev_rot = list(base_rot)
    for t in range(traj.shape[0]):
        arms = []
        for a in range(problem.arms):
            nxt = traj[t, a * k:a * k + 3]
            omega = np.zeros(3)
            rot = prev_rot[a]
            if problem.rotations:
                new_rot = Rotation.from_rotvec(traj[t, a * k + 3:a * k + 6]) * base_rot[a]
                omega = (new_rot * rot.inv()).as_rotvec() / dt
            xyzw = rot.as_quat()
            pose = np.concatenate([[xyzw[3]], xyzw[:3], prev_pos[a]])
            twist = np.concatenate([omega, (nxt - prev_pos[a]) / dt])
            arms.append(EefCommand(GRASPED, pose, twist, 0.0))
            prev_pos[a] = nxt
            if problem.rotations:
                prev_rot[a] = new_rot
        actions.append(Action(tuple(arms)))
    return actions


def gripper_violation(traj: np.ndarray, problem: PlanProblem) -> bool:
    if problem.gripper_limit is None or problem.arms < 2:
        return False
    k = problem.dof_per_arm
    d = np.linalg.norm(traj[:, 0:3] - traj[:, k:k + 3], axis=1)
    return bool(np.any(d > problem.gripper_limit))


def model_predictor(model: DynamicsModel) -> Predictor:
    def predict(state, action_seqs):
        return rollout_clips(model, [state] * len(action_seqs), action_seqs)

    return predict


def frozen_predictor(state: ParticleState, action_seqs):
    return [np.repeat(state.positions[None], len(a), axis=0) for a in action_seqs]


def trajectory_costs(trajs: np.ndarray, predictor: Predictor, problem: PlanProblem) -> np.ndarray:
    """Cost of each (T, dof) trajectory: summed Chamfer to target plus gripper penalty."""
    seqs = [to_actions(t, problem) for t in trajs]
    try:
        preds = list(predictor(problem.initial, seqs))
    except (RolloutError, CapacityError, FloatingPointError):
        preds = []
        for s in seqs:
            try:
                preds.append(predictor(problem.initial, [s])[0])
            except (RolloutError, CapacityError, FloatingPointError):
                preds.append(None)
    costs = np.empty(len(trajs))
    for i, (traj, pred) in enumerate(zip(trajs, preds)):
        if pred is None or not np.all(np.isfinite(pred)):
            costs[i] = np.inf
            continue
        costs[i] = sum(chamfer(x, problem.target) for x in pred)
        if gripper_violation(traj, problem):
            costs[i] += GRIPPER_PENALTY
    return costs


def trajectory_cost(traj: np.ndarray, predictor: Predictor, problem: PlanProblem) -> float:
    return float(trajectory_costs(np.asarray(traj)[None], predictor, problem)[0])


def mppi_weights(costs: np.ndarray, beta: float) -> np.ndarray:
    finite = np.isfinite(costs)
    if not finite.any():
        raise PlanningError("every sampled trajectory has infinite cost")
    w = np.zeros_like(costs)
    if np.isinf(beta):
        w[finite] = 1.0
    else:
        w[finite] = np.exp(-(costs[finite] - costs[finite].min()) / beta)
    return w / w.sum()


@dataclass
class PlanResult:
    actions: np.ndarray
    cost_trace: list[float] = field(default_factory=list)


def mppi_plan(problem: PlanProblem, config: MppiConfig, predictor: Predictor,
              nominal: np.ndarray | None = None, rng: np.random.Generator | None = None) -> PlanResult:
    rng = rng or np.random.default_rng(config.seed)
    nominal = problem.hold() if nominal is None else np.array(nominal, dtype=float)
    sigma = config.sigma_vector(problem)
    trace = []
    for _ in range(config.iterations):
        trajs = sample_action_trajectories(nominal, sigma, config.samples, rng)
        costs = trajectory_costs(trajs, predictor, problem)
        w = mppi_weights(costs, config.beta)
        nominal = np.einsum("n,ntd->td", w, trajs)
        trace.append(trajectory_cost(nominal, predictor, problem))
    return PlanResult(nominal, trace)


# ---------------------------------------------------------------- closed loop on the oracle


class OracleEnv:
    """Single-gripper oracle world driven by waypoint commands."""

    def __init__(self, scene: OracleScene, gripper: np.ndarray, dt: float = 0.1):
        self.scene = scene
        self.gripper = np.asarray(gripper, dtype=float).copy()
        self.dt = dt

    @property
    def positions(self) -> np.ndarray:
        return self.scene.positions.copy()

    def advance(self, waypoint) -> np.ndarray:
        waypoint = np.asarray(waypoint, dtype=float)
        script = linear_script(self.gripper, waypoint, self.dt)
        substeps = int(round(self.dt / self.scene.dt_sim))
        for s in range(substeps):
            oracle_step(self.scene, {0: script.pose(s * self.scene.dt_sim, self.scene.dt_sim)})
        self.gripper = waypoint
        return self.positions


@dataclass
class MpcResult:
    executed: list[np.ndarray]
    error_curve: list[float]
    cost_traces: list[list[float]]
    final_positions: np.ndarray


def mpc_loop(env: OracleEnv, target: np.ndarray, config: MppiConfig, predictor: Predictor,
             steps: int = 15, horizon: int = 5, h: int = 2) -> MpcResult:
    """Plan, execute the first waypoint on the oracle, re-observe, repeat."""
    rng = np.random.default_rng(config.seed)
    dt = env.dt
    observed = [env.positions]
    errors = [chamfer(observed[-1], target)]
    executed, traces = [], []
    nominal = None
    for _ in range(steps):
        frames = observed[-(h + 1):]
        frames = [frames[0]] * (h + 1 - len(frames)) + frames
        state = ParticleState.from_frames(np.stack(frames), dt, h)
        problem = PlanProblem(state, target, env.gripper[None], horizon=horizon, dt=dt)
        if nominal is not None:
            nominal = np.concatenate([nominal[1:], nominal[-1:]])
        result = mppi_plan(problem, config, predictor, nominal, rng)
        nominal = result.actions
        executed.append(nominal[0].copy())
        traces.append(result.cost_trace)
        observed.append(env.advance(nominal[0]))
        errors.append(chamfer(observed[-1], target))
    return MpcResult(executed, errors, traces, observed[-1])


# ---------------------------------------------------------------- tasks

TASKS = ("lift", "straighten", "relocate")


def make_task(task: str, seed: int, dt: float = 0.1) -> tuple[OracleEnv, np.ndarray]:
    """Oracle environment plus a reachable target produced by a scripted demonstration."""
    rng = np.random.default_rng(seed)
    if task not in TASKS:
        raise ValueError(f"task must be one of {TASKS}")
    curvature = 0.25 if task == "straighten" else 0.05
    scene = make_rope(curvature=curvature, rng=rng, heading=rng.uniform(0, 2 * np.pi))
    start = scene.positions[0].copy()
    scene.pin(0, [0, 1], GripperPose(start))
    if task == "lift":
        goal = start + np.array([0.0, 0.0, 0.2])
    elif task == "straighten":
        away = start - scene.positions[-1]
        away[2] = 0.0
        goal = start + 0.2 * away / np.linalg.norm(away) + np.array([0.0, 0.0, 0.02])
    else:
        ang = rng.uniform(0, 2 * np.pi)
        goal = start + np.array([0.15 * np.cos(ang), 0.15 * np.sin(ang), 0.05])
    demo = scene.copy()
    script = linear_script(start, goal, 1.0)
    frames, _ = simulate(demo, script, 2.0, dt)
    return OracleEnv(scene, start, dt), frames[-1]
