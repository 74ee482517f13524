import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from pgnd import tensorgrad as tg


def fd_grad(f, x, eps=1e-6):
    """Central differences of scalar ``f`` at array ``x``."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f(x)
        x[i] = old - eps
        lo = f(x)
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def check_unary(op, x, weights=None):
    """Compare backward of sum(w * op(x)) against finite differences."""
    w = weights if weights is not None else np.random.default_rng(1).uniform(-1, 1, op(tg.tensor(x)).shape)
    t = tg.Tensor(x.copy(), requires_grad=True)
    tg.tsum(tg.mul(op(t), w)).backward()
    num = fd_grad(lambda a: float(np.sum(op(tg.tensor(a)).data * w)), x.copy())
    scale = max(np.abs(num).max(), 1e-8)
    assert np.abs(t.grad - num).max() / scale < 1e-6


UNARY = {
    "relu": tg.relu,
    "sin": tg.sin,
    "cos": tg.cos,
    "square": tg.square,
    "sqrt": lambda x: tg.sqrt(tg.add(tg.square(x), 0.5)),
    "sum_axis0": lambda x: tg.tsum(x, axis=0),
    "mean_keep": lambda x: tg.mean(x, axis=1, keepdims=True),
    "reshape": lambda x: tg.reshape(x, (-1,)),
    "getitem": lambda x: x[np.array([0, 2, 2])],
    "gather": lambda x: tg.gather(x, np.array([1, 1, 0, 3])),
    "scatter_add": lambda x: tg.scatter_add(x, np.array([0, 2, 0, 1]), 3),
    "segment_max": lambda x: tg.segment_max(x, np.array([0, 1, 4])),
    "segment_min": lambda x: tg.segment_min(x, np.array([0, 3, 4])),
    "spmm": lambda x: tg.spmm(sp.csr_matrix(np.array([[0.5, 0, 1, 0], [0, 2, 0, -1.0]])), x),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@pytest.mark.parametrize("seed", range(10))
def test_unary_gradients_match_finite_differences(name, seed):
    x = np.random.default_rng(seed).uniform(-1, 1, (4, 3))
    if name == "relu":
        x[np.abs(x) < 1e-3] = 0.5  # stay away from the kink
    check_unary(UNARY[name], x)


BINARY = {
    "add": tg.add,
    "sub": tg.sub,
    "mul": tg.mul,
    "div": lambda a, b: tg.div(a, tg.add(tg.square(b), 1.0)),
    "matmul": lambda a, b: tg.matmul(a, tg.reshape(b, (3, 4))),
    "concat": lambda a, b: tg.concat([a, b], axis=1),
    "broadcast_add": lambda a, b: tg.add(a, tg.tsum(b, axis=0)),
}


@pytest.mark.parametrize("name", sorted(BINARY))
@pytest.mark.parametrize("seed", range(10))
def test_binary_gradients_match_finite_differences(name, seed):
    rng = np.random.default_rng(seed)
    a0, b0 = rng.uniform(-1, 1, (4, 3)), rng.uniform(-1, 1, (4, 3))
    op = BINARY[name]
    out_shape = op(tg.tensor(a0), tg.tensor(b0)).shape
    w = rng.uniform(-1, 1, out_shape)
    a, b = tg.Tensor(a0.copy(), requires_grad=True), tg.Tensor(b0.copy(), requires_grad=True)
    tg.tsum(tg.mul(op(a, b), w)).backward()
    num_a = fd_grad(lambda x: float(np.sum(op(tg.tensor(x), tg.tensor(b0)).data * w)), a0.copy())
    num_b = fd_grad(lambda x: float(np.sum(op(tg.tensor(a0), tg.tensor(x)).data * w)), b0.copy())
    for got, num in ((a.grad, num_a), (b.grad, num_b)):
        assert np.abs(got - num).max() / max(np.abs(num).max(), 1e-8) < 1e-6


def test_square_derivative_at_three():
    x = tg.Tensor(np.array(3.0), requires_grad=True)
    tg.square(x).backward()
    assert x.grad == pytest.approx(6.0)


def test_backward_requires_scalar():
    x = tg.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        tg.mul(x, 2.0).backward()


def test_gradients_accumulate_across_backward_calls():
    x = tg.Tensor(np.array(2.0), requires_grad=True)
    tg.mul(x, 3.0).backward()
    tg.mul(x, 3.0).backward()
    assert x.grad == pytest.approx(6.0)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(tg.ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        tg.matmul(np.ones((2, 3)), np.ones((4, 5)))


def test_no_grad_records_nothing():
    x = tg.Tensor(np.ones(2), requires_grad=True)
    with tg.no_grad():
        y = tg.tsum(tg.mul(x, 2.0))
    assert not y.requires_grad


def test_shared_subexpression_gradient():
    x = tg.Tensor(np.array([1.5, -2.0]), requires_grad=True)
    y = tg.mul(x, x)
    tg.tsum(tg.add(y, y)).backward()
    np.testing.assert_allclose(x.grad, 4 * x.data)


@settings(max_examples=30, deadline=None)
@given(st.permutations(list(range(6))))
def test_sum_gradient_is_permutation_invariant(perm):
    data = np.linspace(-1, 1, 6)
    a = tg.Tensor(data.copy(), requires_grad=True)
    tg.tsum(tg.square(tg.gather(a, np.array(perm)))).backward()
    b = tg.Tensor(data.copy(), requires_grad=True)
    tg.tsum(tg.square(b)).backward()
    np.testing.assert_array_equal(a.grad, b.grad)


# ---------------------------------------------------------------- optimizer


def test_adam_first_step_moves_by_lr():
    p = tg.Tensor(np.array([1.0]), requires_grad=True)
    state = tg.AdamState([p], lr=1e-4)
    tg.adam_step([p], [np.array([1.0])], state)
    assert 1.0 - p.data[0] == pytest.approx(1e-4, rel=1e-6)


def test_adam_zero_gradient_keeps_params_and_decays_moments():
    p = tg.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    state = tg.AdamState([p], lr=1e-3)
    tg.adam_step([p], [np.array([0.5, -0.5])], state)
    before = p.data.copy()
    m_before = state.m[0].copy()
    state2 = tg.AdamState([p], lr=1e-3)
    tg.adam_step([p], [np.zeros(2)], state2)
    np.testing.assert_array_equal(p.data, before)
    tg.adam_step([p], [np.zeros(2)], state)
    np.testing.assert_allclose(state.m[0], 0.9 * m_before)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6))
def test_adam_with_zero_lr_is_identity(values):
    p = tg.Tensor(np.array(values), requires_grad=True)
    state = tg.AdamState([p], lr=0.0)
    tg.adam_step([p], [np.ones(len(values))], state)
    np.testing.assert_array_equal(p.data, np.array(values))


def test_adam_is_deterministic():
    outs = []
    for _ in range(2):
        rng = np.random.default_rng(4)
        p = tg.Tensor(rng.normal(size=5), requires_grad=True)
        state = tg.AdamState([p], lr=1e-2)
        for _ in range(3):
            tg.adam_step([p], [rng.normal(size=5)], state)
        outs.append(p.data.copy())
    np.testing.assert_array_equal(outs[0], outs[1])


def test_clip_grad_norm_examples():
    np.testing.assert_allclose(tg.clip_grad_norm([np.array([3.0, 4.0])])[0], [0.6, 0.8])
    small = [np.array([0.3, 0.4])]
    np.testing.assert_array_equal(tg.clip_grad_norm(small)[0], small[0])
    np.testing.assert_array_equal(tg.clip_grad_norm([np.zeros(3)])[0], np.zeros(3))


def test_clip_grad_norm_is_global_across_tensors():
    out = tg.clip_grad_norm([np.array([3.0]), np.array([4.0])], 1.0)
    assert np.sqrt(out[0] ** 2 + out[1] ** 2)[0] == pytest.approx(1.0)


# ---------------------------------------------------------------- mlp and checkpoints


def test_zero_mlp_outputs_zero():
    mlp = tg.Mlp([3, 8, 2])
    np.testing.assert_array_equal(mlp(np.ones((4, 3))).data, np.zeros((4, 2)))


def test_mlp_input_width_checked():
    with pytest.raises(tg.ShapeError):
        tg.Mlp([3, 2])(np.ones((1, 4)))


def test_checkpoint_round_trip(tmp_path):
    arrays = {"a.weight": np.arange(6.0).reshape(2, 3), "scalar": np.array(1.25), "empty": np.zeros((0, 2))}
    path = tmp_path / "m.bin"
    tg.save_checkpoint(path, arrays)
    back = tg.load_checkpoint(path)
    assert list(back) == list(arrays)
    for k in arrays:
        np.testing.assert_array_equal(back[k], arrays[k])
    assert path.read_bytes()[:4] == b"PGND"


def test_checkpoint_rejects_bad_magic_and_truncation(tmp_path):
    path = tmp_path / "m.bin"
    tg.save_checkpoint(path, {"w": np.ones((3, 3))})
    raw = path.read_bytes()
    (tmp_path / "bad.bin").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "short.bin").write_bytes(raw[:-5])
    with pytest.raises(tg.CheckpointError, match="magic"):
        tg.load_checkpoint(tmp_path / "bad.bin")
    with pytest.raises(tg.CheckpointError, match="truncated"):
        tg.load_checkpoint(tmp_path / "short.bin")
