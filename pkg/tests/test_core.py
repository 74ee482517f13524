import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from pgnd.core import (
    Action, EefCommand, FormatError, ParameterError, ParticleState, RunConfig, Trajectory,
    ValidationError, load_dataset, load_trajectory, make_windows, save_trajectory, scale_object,
    split_clips, window_count,
)


def toy_trajectory(T=31, n=5, dt=0.1, seed=0):
    rng = np.random.default_rng(seed)
    frames = [rng.normal(size=(n, 3)) for _ in range(T)]
    actions = [Action.single(rng.normal(size=3), rng.normal(size=3)) for _ in range(T)]
    return Trajectory(dt, frames, actions)


def test_defaults():
    c = RunConfig()
    assert (c.grid_l, c.grid_delta, c.radius_r, c.history_h, c.horizon_K) == (50, 0.02, 0.2, 2, 5)
    assert (c.dt, c.scale_s, c.grasp_radius_a, c.friction_mu, c.batch_size, c.seed) == (0.1, 1.0, 0.1, 0.5, 32, 0)


@pytest.mark.parametrize("bad", [{"grid_delta": 0.0}, {"dt": -1.0}, {"grid_l": 1}, {"horizon_K": 0}])
def test_config_rejects_bad_values(bad):
    with pytest.raises(ParameterError):
        RunConfig(**bad)


def test_config_file_rejects_unknown_keys(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"grid_l": 40, "bogus": 1}))
    with pytest.raises(FormatError, match="bogus"):
        RunConfig.load(p)
    p.write_text(json.dumps({"grid_l": 40}))
    assert RunConfig.load(p).grid_l == 40


def test_eef_quaternion_must_be_unit():
    with pytest.raises(ValidationError):
        EefCommand(0, [2.0, 0, 0, 0, 0, 0, 0], np.zeros(6))


def test_action_arm_count():
    arm = EefCommand()
    assert len(Action((arm, arm)).arms) == 2
    with pytest.raises(ValidationError):
        Action((arm, arm, arm))


def test_particle_state_validation():
    with pytest.raises(ValidationError):
        ParticleState(np.zeros((4, 3)), np.zeros((3, 5, 3)))
    with pytest.raises(ValidationError):
        ParticleState(np.full((1, 3), np.nan), np.zeros((3, 1, 3)))


def test_from_frames_finite_differences():
    frames = np.array([[[0.0, 0, 0]], [[0.01, 0, 0]], [[0.03, 0, 0]]])
    s = ParticleState.from_frames(frames, 0.1, 2)
    np.testing.assert_allclose(s.velocity_history[:, 0, 0], [0.0, 0.1, 0.2])
    s = ParticleState.from_frames(frames, 0.1, 2, previous=frames[0] - 0.005)
    assert s.velocity_history[0, 0, 0] == pytest.approx(0.05)


@pytest.mark.parametrize("T,expected", [(31, 24), (8, 1), (7, 0)])
def test_window_counts(T, expected):
    traj = toy_trajectory(T=T)
    assert len(make_windows(traj, 2, 5)) == expected == window_count(T, 2, 5)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 20), st.integers(0, 4), st.integers(1, 6))
def test_window_count_formula(T, h, K):
    traj = toy_trajectory(T=T, n=2)
    assert len(make_windows(traj, h, K)) == max(0, T - (h + K + 1) + 1)


def test_windows_are_stride_one_and_carry_previous_frame():
    traj = toy_trajectory(T=10)
    w = make_windows(traj, 2, 5)
    assert [x.first_frame_index for x in w] == [0, 1, 2]
    assert w[0].previous_frame is None
    np.testing.assert_array_equal(w[1].previous_frame, traj.frames[0])
    np.testing.assert_array_equal(w[2].tracks[0], traj.frames[2])


def test_round_trip_is_bitwise(tmp_path):
    traj = toy_trajectory()
    traj.frames[0][0, 0] = 0.1 + 0.2  # a value with a long repr
    path = tmp_path / "t.jsonl"
    save_trajectory(traj, path)
    back = load_trajectory(path)
    assert len(back) == 31
    for a, b in zip(traj.frames, back.frames):
        np.testing.assert_array_equal(a, b)
    for a, b in zip(traj.actions, back.actions):
        np.testing.assert_array_equal(a.arms[0].pose, b.arms[0].pose)
        np.testing.assert_array_equal(a.arms[0].twist, b.arms[0].twist)
    assert back.times[-1] == pytest.approx(3.0)


@settings(max_examples=25, deadline=None)
@given(hnp.arrays(np.float64, (3, 2, 3), elements=st.floats(-1e6, 1e6, allow_nan=False)))
def test_round_trip_lossless_for_finite_doubles(tmp_path_factory, frames):
    traj = Trajectory(0.1, list(frames), [Action.single(np.zeros(3))] * 3)
    path = tmp_path_factory.mktemp("rt") / "t.jsonl"
    save_trajectory(traj, path)
    back = load_trajectory(path)
    np.testing.assert_array_equal(np.stack(back.frames), frames)


def test_empty_file_is_format_error(tmp_path):
    p = tmp_path / "e.jsonl"
    p.write_text("")
    with pytest.raises(FormatError):
        load_trajectory(p)


def test_malformed_line_reports_byte_offset(tmp_path):
    traj = toy_trajectory(T=3, n=1)
    p = tmp_path / "t.jsonl"
    save_trajectory(traj, p)
    lines = p.read_text().splitlines()
    lines[2] = "{not json"
    p.write_text("\n".join(lines) + "\n")
    offset = len(lines[0]) + len(lines[1]) + 2
    with pytest.raises(FormatError, match=f"byte offset {offset}"):
        load_trajectory(p)


def test_nan_frame_is_validation_error(tmp_path):
    traj = toy_trajectory(T=3, n=1)
    p = tmp_path / "t.jsonl"
    save_trajectory(traj, p)
    text = p.read_text().splitlines()
    rec = json.loads(text[1])
    rec["x"][0][0] = float("nan")
    text[1] = json.dumps(rec)
    p.write_text("\n".join(text) + "\n")
    with pytest.raises(ValidationError):
        load_trajectory(p)


def test_load_dataset_sorted(tmp_path):
    for i in (2, 0, 1):
        save_trajectory(toy_trajectory(T=4, seed=i), tmp_path / f"{i}.jsonl")
    data = load_dataset(tmp_path)
    assert len(data) == 3
    np.testing.assert_array_equal(data[0].frames[0], toy_trajectory(T=4, seed=0).frames[0])


def test_scale_object_examples():
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 0.2, (50, 3))
    np.testing.assert_array_equal(scale_object(x, 1.0), x)
    diag = lambda p: np.linalg.norm(p.max(0) - p.min(0))  # noqa: E731
    assert diag(scale_object(x, 3.0)) == pytest.approx(3 * diag(x), rel=1e-12)
    with pytest.raises(ParameterError):
        scale_object(x, 0.0)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, (6, 3), elements=st.floats(-10, 10)), st.floats(0.1, 10))
def test_scale_unscale_inverse(x, s):
    np.testing.assert_allclose(scale_object(scale_object(x, s), 1 / s), x, atol=1e-12, rtol=0)


def test_split_clips():
    traj = toy_trajectory(T=100)
    clips = split_clips(traj, 33, 30)
    assert [len(c) for c in clips] == [33, 33, 33]
    np.testing.assert_array_equal(clips[1].frames[0], traj.frames[30])
