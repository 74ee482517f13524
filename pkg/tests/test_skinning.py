import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from pgnd.skinning import (
    DegenerateNeighborhood, KernelSet, blend_quaternions, estimate_rotations, kabsch, lbs_apply,
    lbs_weights, matrix_to_quat, quat_multiply, skin_sequence,
)


def cloud(seed, n=60):
    return np.random.default_rng(seed).uniform(-0.1, 0.1, (n, 3))


def rigid(seed):
    R = Rotation.random(random_state=seed).as_matrix()
    t = np.random.default_rng(seed).normal(size=3)
    return R, t


def test_kabsch_recovers_rotation_and_avoids_reflection():
    src = cloud(0, 10)
    R, _ = rigid(1)
    np.testing.assert_allclose(kabsch(src, src @ R.T), R, atol=1e-10)
    mirror = src * [1, 1, -1]
    got = kabsch(src, mirror)
    assert np.linalg.det(got) == pytest.approx(1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_rotations_of_global_rigid_motion(seed):
    x = cloud(seed)
    R, t = rigid(seed)
    rot = estimate_rotations(x, x @ R.T + t)
    assert np.abs(rot.matrices - R).max() < 1e-6


def test_collinear_neighborhood_falls_back_to_identity():
    line = np.zeros((12, 3))
    line[:, 0] = np.arange(12) * 0.01
    with pytest.warns(DegenerateNeighborhood):
        rot = estimate_rotations(line, line + [0, 0.1, 0], k_rot=4)
    assert rot.degenerate.all()
    np.testing.assert_array_equal(rot.matrices, np.broadcast_to(np.eye(3), rot.matrices.shape))


def test_too_few_particles():
    with pytest.raises(ValueError):
        estimate_rotations(cloud(0, 5), cloud(0, 5), k_rot=8)


def test_lbs_weights_examples():
    pts = cloud(2, 20)
    idx, w = lbs_weights(pts.mean(axis=0), pts, 8)
    assert w.sum() == pytest.approx(1.0)
    assert np.all(w > 0)
    d = np.linalg.norm(pts[idx] - pts.mean(axis=0), axis=1)
    assert np.all(np.diff(w[np.argsort(d)]) <= 1e-15)
    idx, w = lbs_weights(pts[3], pts, 8)
    assert w[list(idx).index(3)] == 1.0


def test_quaternion_helpers():
    q = matrix_to_quat(np.eye(3))
    np.testing.assert_allclose(q, [1, 0, 0, 0])
    a = Rotation.random(random_state=3)
    b = Rotation.random(random_state=4)
    qa, qb = matrix_to_quat(a.as_matrix()), matrix_to_quat(b.as_matrix())
    ab = matrix_to_quat((a * b).as_matrix())
    prod = quat_multiply(qa, qb)
    assert min(np.abs(prod - ab).max(), np.abs(prod + ab).max()) < 1e-12
    both = np.stack([qa, -qa])
    np.testing.assert_allclose(blend_quaternions(both, np.array([0.5, 0.5])), qa, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_skinned_kernels_move_rigidly(seed):
    x = cloud(seed)
    R, t = rigid(seed + 1)
    rng = np.random.default_rng(seed)
    centers = x[:10] + rng.normal(0, 0.005, (10, 3))
    quats = Rotation.random(10, random_state=seed).as_quat()[:, [3, 0, 1, 2]]
    kernels = KernelSet(centers, quats, extra={"opacity": [0.5] * 10})
    moved = lbs_apply(kernels, x, x @ R.T + t)
    assert np.abs(moved.centers - (centers @ R.T + t)).max() < 1e-6
    expected = matrix_to_quat(R[None] @ Rotation.from_quat(quats[:, [1, 2, 3, 0]]).as_matrix())
    err = np.minimum(np.abs(moved.quats - expected).max(1), np.abs(moved.quats + expected).max(1))
    assert err.max() < 1e-6
    assert moved.extra == kernels.extra


def test_identity_motion_keeps_kernels():
    x = cloud(5)
    kernels = KernelSet(x[:4] + 0.001, np.tile([1.0, 0, 0, 0], (4, 1)))
    out = lbs_apply(kernels, x, x)
    np.testing.assert_allclose(out.centers, kernels.centers, atol=1e-12)
    np.testing.assert_allclose(out.quats, kernels.quats, atol=1e-12)


def test_sequence_and_json_round_trip(tmp_path):
    x = cloud(6)
    frames = [x + [0.01 * i, 0, 0] for i in range(4)]
    kernels = KernelSet(x[:3], np.tile([1.0, 0, 0, 0], (3, 1)))
    seq = skin_sequence(kernels, frames)
    assert len(seq) == 4
    np.testing.assert_allclose(seq[-1].centers, x[:3] + [0.03, 0, 0], atol=1e-12)
    kernels.save(tmp_path / "k.json")
    back = KernelSet.load(tmp_path / "k.json")
    np.testing.assert_array_equal(back.centers, kernels.centers)


def test_kernel_validation():
    with pytest.raises(ValueError):
        KernelSet(np.zeros((2, 3)), np.tile([2.0, 0, 0, 0], (2, 1)))
    with pytest.raises(ValueError):
        KernelSet(np.zeros((2, 3)), np.tile([1.0, 0, 0, 0], (3, 1)))
