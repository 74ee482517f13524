"""Rollout loss, training loop and clip evaluation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensorgrad as tg
from .core import Action, ParticleState, RunConfig, Trajectory, TrajectoryWindow, make_windows, split_clips
from .dynamics import DynamicsModel, RolloutError, rollout_batch
from .gridops import CapacityError
from .encoder import ModelParams
from .metrics import MetricReport, chamfer, emd, mde
from .synth import choose_cameras, visible_mask

log = logging.getLogger(__name__)

VIEW_PROTOCOLS = ("full", "random")
VAL_SECONDS = 3.0


@dataclass
class WindowBatch:
    positions: np.ndarray
    history: list[np.ndarray]
    offsets: np.ndarray
    targets: list[np.ndarray]  # K arrays, (N, 3)
    actions: list[list[Action]]  # [step][scene]
    row_weight: np.ndarray  # (N,) 1 / (3 * n_b * B)


def build_batch(windows: Sequence[TrajectoryWindow], cfg: RunConfig,
                subsets: Sequence[np.ndarray | None] | None = None) -> WindowBatch:
    """Stack windows into one segmented batch, optionally keeping a particle subset per window."""
    h, K = cfg.history_h, cfg.horizon_K
    subsets = subsets or [None] * len(windows)
    pos, hist, tgt, weights, off = [], [[] for _ in range(h + 1)], [[] for _ in range(K)], [], [0]
    for w, keep in zip(windows, subsets):
        if w.tracks.shape[0] != h + K + 1:
            raise ValueError(f"window has {w.tracks.shape[0]} frames, expected {h + K + 1}")
        state = w.initial_state(h, cfg.dt)
        idx = np.arange(state.n) if keep is None else np.asarray(keep)
        pos.append(state.positions[idx])
        for i in range(h + 1):
            hist[i].append(state.velocity_history[i][idx])
        for k in range(K):
            tgt[k].append(w.tracks[h + 1 + k][idx])
        weights.append(np.full(len(idx), 1.0 / (3 * len(idx) * len(windows))))
        off.append(off[-1] + len(idx))
    actions = [[w.actions[h + k] for w in windows] for k in range(K)]
    return WindowBatch(
        np.concatenate(pos), [np.concatenate(v) for v in hist], np.array(off),
        [np.concatenate(t) for t in tgt], actions, np.concatenate(weights),
    )


def batch_loss(model: DynamicsModel, batch: WindowBatch) -> tg.Tensor:
    """Sum over steps of the per-scene mean squared position error, averaged over scenes."""
    preds = rollout_batch(model, batch.positions, batch.history, batch.offsets, batch.actions)
    loss = None
    for pred, target in zip(preds, batch.targets):
        term = tg.tsum(tg.mul(tg.square(tg.sub(pred, target)), batch.row_weight[:, None]))
        loss = term if loss is None else tg.add(loss, term)
    return loss


def loss_rollout(window: TrajectoryWindow, model: DynamicsModel) -> tg.Tensor:
    return batch_loss(model, build_batch([window], model.config))


def view_subsets(windows: Sequence[TrajectoryWindow], cfg: RunConfig, rng: np.random.Generator,
                 protocol: str) -> list[np.ndarray | None]:
    """Per-window indices of particles visible from 1-4 random cameras at the current frame."""
    if protocol == "full":
        return [None] * len(windows)
    out = []
    for w in windows:
        current = w.tracks[cfg.history_h]
        center = current.mean(axis=0)
        center[2] = cfg.ground_height
        cams = choose_cameras(int(rng.integers(1, 5)), rng, center=center)
        keep = np.flatnonzero(visible_mask(current, cams))
        out.append(keep if len(keep) else None)
    return out


@dataclass
class TrainState:
    params: ModelParams
    adam: tg.AdamState
    step: int = 0
    epoch: int = 0
    best_val_mde: float = float("inf")
    best_params: dict[str, np.ndarray] | None = None
    rng: np.random.Generator | None = None
    history: list[tuple[int, float, float]] = field(default_factory=list)  # (step, train loss, val mde)
    aborted: bool = False


def split_trajectories(trajectories: Sequence[Trajectory], rng: np.random.Generator,
                       val_fraction: float = 0.1):
    order = rng.permutation(len(trajectories))
    nval = int(round(val_fraction * len(trajectories)))
    if len(trajectories) < 2 or nval == 0:
        return list(trajectories), list(trajectories[:1])
    val = [trajectories[i] for i in order[:nval]]
    train = [trajectories[i] for i in order[nval:]]
    return train, val


def train(trajectories: Sequence[Trajectory], config: RunConfig, view_protocol: str = "full",
          mode: str = "grid", val_trajectories: Sequence[Trajectory] | None = None,
          checkpoint: str | None = None, steps: int | None = None,
          callback: Callable[[TrainState], None] | None = None) -> tuple[DynamicsModel, TrainState]:
    """Fit a dynamics model with Adam on K-step rollout loss; keeps the best-validation weights."""
    if view_protocol not in VIEW_PROTOCOLS:
        raise ValueError(f"view protocol must be one of {VIEW_PROTOCOLS}")
    rng = np.random.default_rng(config.seed)
    model = DynamicsModel(config, mode=mode, seed=int(rng.integers(2**63)))
    if val_trajectories is None:
        trajectories, val_trajectories = split_trajectories(list(trajectories), rng)
    val_clips = validation_clips(val_trajectories, config)
    windows = [w for t in trajectories for w in make_windows(t, config.history_h, config.horizon_K)]
    if not windows:
        raise ValueError("no training windows: trajectories shorter than h+K+1 frames")
    params = model.parameters()
    state = TrainState(model.params, tg.AdamState(params, lr=config.lr), rng=rng)
    total = config.train_steps if steps is None else steps
    order = rng.permutation(len(windows))
    cursor = 0
    last_loss = float("nan")
    for it in range(total):
        if cursor + config.batch_size > len(order):
            order = rng.permutation(len(windows))
            cursor = 0
            state.epoch += 1
        picked = [windows[i] for i in order[cursor:cursor + config.batch_size]]
        cursor += config.batch_size
        subsets = view_subsets(picked, config, rng, view_protocol)
        batch = build_batch(picked, config, subsets)
        try:
            loss = batch_loss(model, batch)
        except RolloutError:
            loss = None
        if loss is None or not np.isfinite(loss.item()):
            log.warning("non-finite loss at step %d; keeping last good weights", it)
            if state.best_params is not None:
                model.params.load_arrays(state.best_params)
            state.aborted = True
            break
        model.params.zero_grad()
        loss.backward()
        grads = tg.clip_grad_norm([p.grad for p in params], 1.0)
        state.adam.lr = learning_rate(config, it, total)
        tg.adam_step(params, grads, state.adam)
        state.step += 1
        last_loss = loss.item()
        if state.step % config.eval_every == 0 or state.step == total:
            try:
                val = evaluate(model, val_clips, seed=config.seed, metrics=("mde",))["mde"]["mean"]
            except (RolloutError, CapacityError):
                val = float("inf")
            state.history.append((state.step, last_loss, val))
            log.info("step %d loss %.3e val mde %.4f", state.step, last_loss, val)
            if val < state.best_val_mde:
                state.best_val_mde = val
                state.best_params = model.params.named_arrays()
                if checkpoint:
                    save_model(model, checkpoint)
            if callback:
                callback(state)
    if state.best_params is not None:
        model.params.load_arrays(state.best_params)
    return model, state


def learning_rate(config: RunConfig, step: int, total: int) -> float:
    r = config.lr_final_ratio
    return config.lr * (r + (1.0 - r) * 0.5 * (1.0 + math.cos(math.pi * step / max(total, 1))))


def validation_clips(trajectories: Sequence[Trajectory], config: RunConfig) -> list[Trajectory]:
    """Cut validation recordings into non-overlapping clips of a few seconds each."""
    length = config.history_h + 1 + int(round(VAL_SECONDS / config.dt))
    clips = [c for t in trajectories for c in split_clips(t, length)]
    return clips or [t for t in trajectories if len(t) >= config.history_h + 2]


# ---------------------------------------------------------------- evaluation


def clip_start(traj: Trajectory, h: int, dt: float) -> ParticleState:
    x = traj.tracks()
    return ParticleState.from_frames(x[: h + 1], dt, h, time=h * dt)


def rollout_clips(model: DynamicsModel | None, states: Sequence[ParticleState],
                  actions: Sequence[Sequence[Action]]) -> list[np.ndarray]:
    """Batched no-grad rollouts of scenes with any particle counts.

    ``actions[b]`` is scene ``b``'s action sequence; all must have equal length.
    Returns one (steps, n_b, 3) array per scene. ``model=None`` is the frozen baseline.
    """
    steps = len(actions[0])
    if model is None:
        return [np.repeat(s.positions[None], steps, axis=0) for s in states]
    offsets = np.concatenate([[0], np.cumsum([s.n for s in states])])
    pos = np.concatenate([s.positions for s in states])
    hist = [np.concatenate([s.velocity_history[i] for s in states]) for i in range(states[0].history + 1)]
    per_step = [[a[k] for a in actions] for k in range(steps)]
    with tg.no_grad():
        preds = rollout_batch(model, pos, hist, offsets, per_step)
    stacked = np.stack([p.data for p in preds])
    return [stacked[:, offsets[b]:offsets[b + 1]] for b in range(len(states))]


def evaluate(model: DynamicsModel | None, clips: Sequence[Trajectory], views: int | None = None,
             seed: int = 0, config: RunConfig | None = None, metrics: Sequence[str] = ("mde", "chamfer", "emd"),
             max_steps: int | None = None) -> dict:
    """Roll out every clip from frame h to its end and average metrics over predicted frames.

    ``views`` restricts the initial particles to those visible from that many random cameras;
    errors are measured on the same particles.
    """
    cfg = config or (model.config if model is not None else RunConfig())
    h = cfg.history_h
    rng = np.random.default_rng(seed)
    groups: dict[int, list[int]] = {}
    for i, c in enumerate(clips):
        if len(c) < h + 2:
            raise ValueError(f"clip {i} has {len(c)} frames; need at least {h + 2}")
        steps = len(c) - 1 - h if max_steps is None else min(max_steps, len(c) - 1 - h)
        groups.setdefault(steps, []).append(i)
    report = MetricReport({m: [] for m in metrics})
    per_clip: dict[int, dict[str, float]] = {}
    subsets = []
    for c in clips:
        if views is None:
            subsets.append(None)
            continue
        current = c.tracks()[h]
        center = current.mean(axis=0)
        center[2] = cfg.ground_height
        keep = np.flatnonzero(visible_mask(current, choose_cameras(views, rng, center=center)))
        subsets.append(keep if len(keep) else None)
    for steps, idx in groups.items():
        states, actions = [], []
        for i in idx:
            s = clip_start(clips[i], h, cfg.dt)
            if subsets[i] is not None:
                s = s.subset(subsets[i])
            states.append(s)
            actions.append(clips[i].actions[h:h + steps])
        preds = rollout_clips(model, states, actions)
        for i, pred in zip(idx, preds):
            truth = clips[i].tracks()[h + 1:h + 1 + steps]
            if subsets[i] is not None:
                truth = truth[:, subsets[i]]
            vals = {}
            for name in metrics:
                fn = {"mde": mde, "chamfer": chamfer, "emd": emd}[name]
                vals[name] = float(np.mean([fn(p, t) for p, t in zip(pred, truth)]))
            per_clip[i] = vals
    for i in range(len(clips)):
        report.add(**per_clip[i])
    return report.summary()


# ---------------------------------------------------------------- checkpoints

_MODE_CODES = {"grid": 0.0, "particle": 1.0}


def save_model(model: DynamicsModel, path) -> None:
    arrays = model.params.named_arrays()
    for key, value in model.config.to_dict().items():
        arrays[f"meta/{key}"] = np.array(float(value))
    arrays["meta/mode"] = np.array(_MODE_CODES[model.mode])
    tg.save_checkpoint(path, arrays)


def load_model(path) -> DynamicsModel:
    arrays = tg.load_checkpoint(path)
    fields = RunConfig.__dataclass_fields__
    meta = {}
    for key, f in fields.items():
        if f"meta/{key}" in arrays:
            v = float(arrays[f"meta/{key}"])
            meta[key] = int(v) if f.type in ("int", int) else v
    cfg = RunConfig(**meta)
    mode = "particle" if float(arrays.get("meta/mode", 0.0)) == 1.0 else "grid"
    model = DynamicsModel(cfg, mode=mode)
    model.params.load_arrays({k: v for k, v in arrays.items() if not k.startswith("meta/")})
    return model
