"""Small dense-tensor autodiff engine on top of numpy.

Tensors wrap float64 arrays. Every operation records its parents and a
closure that maps the output gradient to parent gradients; ``backward``
walks the recorded graph in reverse topological order. Only leaves keep a
``.grad`` after the pass, and leaf gradients accumulate across calls.
"""
from __future__ import annotations

import contextlib
import struct
from collections.abc import Iterable, Sequence
from typing import Callable

import numpy as np
import scipy.sparse as sp

__all__ = [
    "ShapeError",
    "Tensor",
    "tensor",
    "no_grad",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "relu",
    "sin",
    "cos",
    "square",
    "sqrt",
    "tsum",
    "mean",
    "concat",
    "gather",
    "scatter_add",
    "segment_max",
    "segment_min",
    "spmm",
    "reshape",
    "Mlp",
    "AdamState",
    "adam_step",
    "clip_grad_norm",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def tensor(x, requires_grad: bool = False) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=requires_grad)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast_check(a, b, "add")
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast_check(a, b, "sub")
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast_check(a, b, "mul")
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        ),
    )


def div(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast_check(a, b, "div")
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None,
        ),
    )


def relu(x) -> Tensor:
    x = tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sin(x) -> Tensor:
    x = tensor(x)
    return _make(np.sin(x.data), (x,), lambda g: (g * np.cos(x.data),))


def cos(x) -> Tensor:
    x = tensor(x)
    return _make(np.cos(x.data), (x,), lambda g: (-g * np.sin(x.data),))


def square(x) -> Tensor:
    x = tensor(x)
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def sqrt(x) -> Tensor:
    x = tensor(x)
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (0.5 * g / out,))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _make(
        a.data @ b.data,
        (a, b),
        lambda g: (
            g @ b.data.T if a.requires_grad else None,
            a.data.T @ g if b.requires_grad else None,
        ),
    )


def spmm(matrix: sp.spmatrix, x) -> Tensor:
    """Product of a constant sparse matrix with a dense tensor."""
    x = tensor(x)
    if matrix.shape[1] != x.shape[0]:
        raise ShapeError(f"spmm: incompatible shapes {matrix.shape} and {x.shape}")
    m = sp.csr_matrix(matrix)
    return _make(np.asarray(m @ x.data), (x,), lambda g: (np.asarray(m.T @ g),))


# ---------------------------------------------------------------- reductions


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def segment_max(x, offsets: np.ndarray) -> Tensor:
    """Row-wise max within contiguous row segments ``offsets[i]:offsets[i+1]``.

    Ties send the gradient to the first maximal row.
    """
    x = tensor(x)
    offsets = np.asarray(offsets)
    nseg = len(offsets) - 1
    if np.any(np.diff(offsets) <= 0):
        raise ShapeError("segment_max: empty segment")
    out = np.empty((nseg,) + x.shape[1:])
    arg = np.empty((nseg,) + x.shape[1:], dtype=np.int64)
    for s in range(nseg):
        lo, hi = offsets[s], offsets[s + 1]
        a = np.argmax(x.data[lo:hi], axis=0)
        arg[s] = a + lo
        out[s] = np.take_along_axis(x.data[lo:hi], a[None], axis=0)[0]

    def backward(g):
        gx = np.zeros_like(x.data)
        cols = np.broadcast_to(np.arange(int(np.prod(x.shape[1:]))), (nseg, int(np.prod(x.shape[1:]))))
        flat = gx.reshape(x.shape[0], -1)
        np.add.at(flat, (arg.reshape(nseg, -1), cols), g.reshape(nseg, -1))
        return (gx,)

    return _make(out, (x,), backward)


def segment_min(x, offsets: np.ndarray) -> Tensor:
    return mul(segment_max(mul(x, -1.0), offsets), -1.0)


# ---------------------------------------------------------------- structure


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [tensor(t) for t in tensors]
    ndim = ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ndim or any(
            t.shape[d] != ts[0].shape[d] for d in range(ndim) if d != axis % ndim
        ):
            raise ShapeError(f"concat: incompatible shapes {ts[0].shape} and {t.shape}")
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), backward)


def gather(x, index) -> Tensor:
    """``x[index]`` along axis 0 with an integer index array of any shape."""
    x = tensor(x)
    index = np.asarray(index, dtype=np.int64)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _make(x.data[index], (x,), backward)


def scatter_add(x, index, n: int) -> Tensor:
    """Sum rows of ``x`` into ``n`` output rows chosen by ``index``."""
    x = tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if index.shape != x.shape[: index.ndim]:
        raise ShapeError(f"scatter_add: index shape {index.shape} vs data {x.shape}")
    out = np.zeros((n,) + x.shape[index.ndim:])
    np.add.at(out, index, x.data)
    return _make(out, (x,), lambda g: (g[index],))


def getitem(x, key) -> Tensor:
    x = tensor(x)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, key, g)
        return (gx,)

    return _make(np.array(x.data[key]), (x,), backward)


def reshape(x, shape) -> Tensor:
    x = tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


# ---------------------------------------------------------------- layers


class Mlp:
    """Fully connected network: ReLU between layers, identity at the output."""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator | None = None, name: str = "mlp"):
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        self.sizes = list(sizes)
        self.name = name
        self.layers: list[tuple[Tensor, Tensor]] = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            if rng is None:
                w = np.zeros((fan_in, fan_out))
            else:
                # He-uniform for hidden layers, small output layer
                bound = np.sqrt(6.0 / fan_in)
                if i == len(sizes) - 2:
                    bound *= 0.1
                w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            self.layers.append(
                (
                    Tensor(w, requires_grad=True, name=f"{name}.{i}.weight"),
                    Tensor(np.zeros(fan_out), requires_grad=True, name=f"{name}.{i}.bias"),
                )
            )

    def __call__(self, x) -> Tensor:
        x = tensor(x)
        if x.shape[-1] != self.sizes[0]:
            raise ShapeError(f"{self.name}: expected input width {self.sizes[0]}, got {x.shape}")
        for i, (w, b) in enumerate(self.layers):
            x = add(matmul(x, w), b)
            if i < len(self.layers) - 1:
                x = relu(x)
        return x

    def parameters(self) -> list[Tensor]:
        return [t for layer in self.layers for t in layer]


class AdamState:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState) -> None:
    """In-place Adam update with bias correction."""
    if len(params) != len(state.m):
        raise ShapeError(f"adam_step: {len(params)} params but state tracks {len(state.m)}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: grad {g.shape} vs param {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def clip_grad_norm(grads: Sequence[np.ndarray | None], max_norm: float = 1.0) -> list[np.ndarray | None]:
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads if g is not None)))
    if total <= max_norm:
        return list(grads)
    scale = max_norm / total
    return [None if g is None else g * scale for g in grads]


# ---------------------------------------------------------------- checkpoints

_MAGIC = b"PGND"
_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: dict[str, np.ndarray]) -> None:
    chunks = [_MAGIC, struct.pack("<II", _VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != _MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    pos = 4

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    version, count = take("<II")
    if version != _VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = take("<I")
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = take("<I")
        dims = take(f"<{rank}I") if rank else ()
        n = int(np.prod(dims)) if rank else 1
        if pos + 8 * n > len(buf):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        out[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(dims).copy()
        pos += 8 * n
    return out


def parameters_of(modules: Iterable[Mlp]) -> list[Tensor]:
    return [p for m in modules for p in m.parameters()]
