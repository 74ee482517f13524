import numpy as np
import pytest

from pgnd.core import NONPREHENSILE, Action, EefCommand, RunConfig, Trajectory, make_windows
from pgnd.dynamics import DynamicsModel
from pgnd.encoder import ModelParams
from pgnd.synth import generate
from pgnd.train import (
    build_batch, evaluate, learning_rate, load_model, loss_rollout, save_model, train, view_subsets,
)


def idle_action(pos):
    # a still, open gripper near the object: no grasp and zero robot-particle velocity
    return Action((EefCommand(NONPREHENSILE, [1, 0, 0, 0, *pos], np.zeros(6), 0.03),))


def zero_model(cfg=RunConfig()):
    return DynamicsModel(cfg, params=ModelParams(cfg.history_h, cfg.feature_dim, cfg.pe_freqs, None))


def moving_point(step, frames=8, n=1):
    x0 = np.tile([0.1, 0.1, 0.1], (n, 1))
    return Trajectory(0.1, [x0 + t * np.asarray(step) for t in range(frames)],
                      [idle_action([0.1, 0.1, 0.3])] * frames)


def test_loss_examples():
    model = zero_model()
    static = make_windows(moving_point([0, 0, 0]), 2, 5)[0]
    assert loss_rollout(static, model).item() == 0.0
    # inputs at rest, target moving 0.01 m per coordinate per step after the history
    x0 = np.full((1, 3), 0.1)
    frames = [x0] * 3 + [x0 + 0.01 * i for i in range(1, 6)]
    window = make_windows(Trajectory(0.1, frames, [idle_action([0.1, 0.1, 0.3])] * 8), 2, 5)[0]
    assert loss_rollout(window, model).item() == pytest.approx(sum((0.01 * i) ** 2 for i in range(1, 6)))
    assert loss_rollout(window, model).item() == pytest.approx(5.5e-3)


def test_loss_nonnegative_and_zero_for_perfect_prediction():
    traj = moving_point([0, 0, 0], n=3)
    model = DynamicsModel(seed=1)
    for w in make_windows(traj, 2, 5):
        assert loss_rollout(w, model).item() >= 0


def test_learning_rate_schedule():
    cfg = RunConfig(lr=1e-3, lr_final_ratio=0.1)
    assert learning_rate(cfg, 0, 100) == pytest.approx(1e-3)
    assert learning_rate(cfg, 100, 100) == pytest.approx(1e-4)
    assert learning_rate(RunConfig(lr=1e-3), 50, 100) == pytest.approx(1e-3)


@pytest.fixture(scope="module")
def rope_clips():
    return [generate("rope", s, duration=1.5) for s in range(3)]


def test_zero_learning_rate_keeps_parameters(rope_clips):
    cfg = RunConfig(lr=0.0, train_steps=3, eval_every=3, batch_size=2)
    model, state = train(rope_clips[:1], cfg, val_trajectories=rope_clips[1:2])
    fresh = DynamicsModel(cfg, seed=int(np.random.default_rng(cfg.seed).integers(2**63)))
    for a, b in zip(model.parameters(), fresh.parameters()):
        np.testing.assert_array_equal(a.data, b.data)
    assert state.step == 3


def test_training_is_deterministic(rope_clips, tmp_path):
    cfg = RunConfig(lr=1e-3, train_steps=4, eval_every=2, batch_size=2, seed=5)
    a, sa = train(rope_clips[:2], cfg, val_trajectories=rope_clips[2:])
    b, sb = train(rope_clips[:2], cfg, val_trajectories=rope_clips[2:])
    save_model(a, tmp_path / "a.pgnd")
    save_model(b, tmp_path / "b.pgnd")
    assert (tmp_path / "a.pgnd").read_bytes() == (tmp_path / "b.pgnd").read_bytes()
    assert sa.history == sb.history
    back = load_model(tmp_path / "a.pgnd")
    assert back.mode == "grid" and back.config == a.config
    for p, q in zip(back.parameters(), a.parameters()):
        np.testing.assert_array_equal(p.data, q.data)


def test_training_reduces_loss_on_a_small_set(rope_clips):
    cfg = RunConfig(lr=1e-3, train_steps=30, eval_every=10, batch_size=4, seed=2)
    _, state = train(rope_clips[:2], cfg, mode="particle", val_trajectories=rope_clips[2:])
    assert np.isfinite(state.best_val_mde)
    assert len(state.history) == 3


def test_view_masking_leaves_targets_unchanged(rope_clips):
    cfg = RunConfig()
    windows = make_windows(rope_clips[0], 2, 5)[:4]
    full = build_batch(windows, cfg)
    subsets = view_subsets(windows, cfg, np.random.default_rng(0), "random")
    masked = build_batch(windows, cfg, subsets)
    again = build_batch(windows, cfg)
    for a, b in zip(full.targets, again.targets):
        np.testing.assert_array_equal(a, b)
    start = 0
    for w, keep, k0 in zip(windows, subsets, np.diff(masked.offsets)):
        np.testing.assert_array_equal(masked.targets[0][start:start + k0], w.tracks[3][keep])
        start += k0
    assert masked.positions.shape[0] <= full.positions.shape[0]


def test_frozen_model_mde_is_mean_displacement(rope_clips):
    clip = rope_clips[0]
    report = evaluate(None, [clip])
    x = clip.tracks()
    disp = np.linalg.norm(x[3:] - x[2], axis=2).mean()
    assert report["mde"]["mean"] == pytest.approx(disp, rel=1e-12)
    assert set(report) == {"mde", "chamfer", "emd"}
    assert report["mde"]["std"] == 0.0


def test_perfect_prediction_scores_zero():
    clip = moving_point([0, 0, 0], frames=10, n=4)
    report = evaluate(zero_model(), [clip])
    assert all(report[m]["mean"] == 0.0 for m in report)


def test_unknown_protocol_and_short_data(rope_clips):
    with pytest.raises(ValueError):
        train(rope_clips, RunConfig(), view_protocol="two")
    with pytest.raises(ValueError):
        train([moving_point([0, 0, 0], frames=5)], RunConfig(), val_trajectories=rope_clips[:1])


def test_validation_error_falls_over_first_ten_evaluations():
    # five minutes of rope interaction: 25 episodes of 12 s, validation on unseen 3 s clips
    from pgnd.benchmark import BenchmarkSpec, rope_data

    spec = BenchmarkSpec(train_episodes=25, val_clips=8, test_clips=1)
    data = rope_data(11, spec)
    cfg = spec.config.replace(horizon_K=5, lr=RunConfig().lr, train_steps=200, eval_every=20,
                              lr_final_ratio=1.0)
    _, state = train(data.train, cfg, mode="particle", val_trajectories=data.val)
    val = np.array([v for _, _, v in state.history[:10]])
    smoothed = np.convolve(val, np.ones(3) / 3, mode="valid")
    assert len(val) == 10
    assert np.all(np.diff(smoothed) <= 0), np.round(val, 4)
