"""Point encoder and neural velocity field."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import tensorgrad as tg
from .core import ValidationError

HIDDEN = 64
FIELD_HIDDEN = (128, 128)


def point_input_dim(h: int) -> int:
    """Position plus ``h+1`` velocity frames."""
    return 3 + 3 * (h + 1)


@dataclass
class PointFeatures:
    per_point: np.ndarray  # (n, d)


@dataclass
class PooledFeature:
    value: np.ndarray
    support_count: int


class ModelParams:
    """Encoder weights (local and global MLPs) and velocity-field weights."""

    def __init__(self, h: int = 2, feature_dim: int = 64, pe_freqs: int = 6,
                 rng: np.random.Generator | None = None, hidden: int = HIDDEN,
                 field_hidden: tuple[int, ...] = FIELD_HIDDEN):
        self.h = h
        self.feature_dim = feature_dim
        self.pe_freqs = pe_freqs
        in_dim = point_input_dim(h) + 1  # trailing robot/object tag
        self.local = tg.Mlp([in_dim, hidden, hidden], rng, name="encoder.local")
        self.glob = tg.Mlp([2 * hidden, feature_dim], rng, name="encoder.global")
        self.field = tg.Mlp([6 * pe_freqs + feature_dim, *field_hidden, 3], rng, name="field")

    def modules(self) -> list[tg.Mlp]:
        return [self.local, self.glob, self.field]

    def parameters(self) -> list[tg.Tensor]:
        return tg.parameters_of(self.modules())

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            if p.name not in arrays:
                raise KeyError(f"checkpoint lacks {p.name}")
            if arrays[p.name].shape != p.shape:
                raise tg.ShapeError(f"{p.name}: checkpoint {arrays[p.name].shape} vs model {p.shape}")
            p.data = np.array(arrays[p.name], dtype=np.float64)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def encoder_inputs(grid_pos, velocity_history, tag=None):
    """Concatenate position, velocity frames and the tag column per point."""
    grid_pos = tg.tensor(grid_pos)
    parts = [grid_pos, *[tg.tensor(v) for v in velocity_history]]
    n = grid_pos.shape[0]
    parts.append(np.zeros((n, 1)) if tag is None else np.asarray(tag, dtype=float).reshape(n, 1))
    return tg.concat(parts, axis=1)


def encode(inputs, offsets: np.ndarray, params: ModelParams) -> tg.Tensor:
    """Per-point features for a batch of clouds stored as contiguous row segments."""
    local = params.local(inputs)
    pooled = tg.segment_max(local, offsets)
    seg = np.repeat(np.arange(len(offsets) - 1), np.diff(offsets))
    return params.glob(tg.concat([local, tg.gather(pooled, seg)], axis=1))


def encode_points(grid_pos: np.ndarray, velocity_history: np.ndarray, params: ModelParams,
                  tag=None) -> PointFeatures:
    grid_pos = np.asarray(grid_pos, dtype=np.float64)
    if grid_pos.shape[0] == 0:
        raise ValueError("encode_points needs at least one particle")
    if not (np.all(np.isfinite(grid_pos)) and np.all(np.isfinite(velocity_history))):
        raise ValidationError("non-finite encoder input")
    with tg.no_grad():
        x = encoder_inputs(grid_pos, velocity_history, tag)
        z = encode(x, np.array([0, len(grid_pos)]), params)
    return PointFeatures(z.data)


def posenc(x, freqs: int = 6):
    """Sinusoidal encoding, axis-major: per axis, per k, ``(sin, cos)(2^k pi x)``.

    Arrays in, array out; tensors in, tensor out.
    """
    scales = np.repeat(np.pi * 2.0 ** np.arange(freqs), 2)  # (2F,)
    if isinstance(x, tg.Tensor):
        cols = np.repeat(np.arange(3), 2 * freqs)
        arg = tg.mul(x[:, cols], np.tile(scales, 3))
        s, c = tg.sin(arg), tg.cos(arg)
        even = np.tile(np.arange(2 * freqs) % 2 == 0, 3)
        return tg.add(tg.mul(s, even.astype(float)), tg.mul(c, (~even).astype(float)))
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    arg = x[:, :, None] * scales[None, None, :]  # (n, 3, 2F)
    out = np.where(np.arange(2 * freqs) % 2 == 0, np.sin(arg), np.cos(arg)).reshape(len(x), -1)
    return out[0] if single else out


def pooling_matrix(queries: np.ndarray, points: np.ndarray, r: float,
                   query_offsets: np.ndarray | None = None,
                   point_offsets: np.ndarray | None = None) -> tuple[sp.csr_matrix, np.ndarray]:
    """Row-normalized neighbor matrix (queries x points) and per-query support counts.

    With offsets, query segment ``b`` only sees point segment ``b``.
    """
    if query_offsets is None:
        query_offsets = np.array([0, len(queries)])
        point_offsets = np.array([0, len(points)])
    rows, cols = [], []
    for b in range(len(query_offsets) - 1):
        q0, q1 = query_offsets[b], query_offsets[b + 1]
        p0, p1 = point_offsets[b], point_offsets[b + 1]
        d2 = ((queries[q0:q1, None, :] - points[None, p0:p1, :]) ** 2).sum(-1)
        qi, pi = np.nonzero(d2 <= r * r)
        rows.append(qi + q0)
        cols.append(pi + p0)
    rows = np.concatenate(rows) if rows else np.zeros(0, np.int64)
    cols = np.concatenate(cols) if cols else np.zeros(0, np.int64)
    counts = np.bincount(rows, minlength=len(queries))
    vals = 1.0 / np.maximum(counts[rows], 1)
    mat = sp.csr_matrix((vals, (rows, cols)), shape=(len(queries), len(points)))
    return mat, counts


def pool_local(features: PointFeatures, positions, query, r: float) -> PooledFeature:
    """Mean feature of particles within ``r`` of ``query``; zero when none are."""
    if not r > 0:
        raise ValueError("pooling radius must be > 0")
    positions = np.asarray(positions, dtype=np.float64)
    mat, counts = pooling_matrix(np.asarray(query, dtype=float).reshape(1, 3), positions, r)
    return PooledFeature(np.asarray(mat @ features.per_point)[0], int(counts[0]))


def field_forward(query_enc, pooled, params: ModelParams) -> tg.Tensor:
    return params.field(tg.concat([query_enc, pooled], axis=1))


def field_eval(query, pooled: PooledFeature, params: ModelParams) -> np.ndarray:
    query = np.asarray(query, dtype=np.float64)
    if not (np.all(np.isfinite(query)) and np.all(np.isfinite(pooled.value))):
        raise ValidationError("non-finite field input")
    if pooled.value.shape != (params.feature_dim,):
        raise tg.ShapeError(f"pooled feature has shape {pooled.value.shape}, expected ({params.feature_dim},)")
    with tg.no_grad():
        out = field_forward(posenc(query, params.pe_freqs)[None], pooled.value[None], params)
    return out.data[0]
