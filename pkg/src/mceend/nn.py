"""Network building blocks: layer norm, linear frontend, FFN, and attention.

All functions take features as columns: a sequence of T frames with
d-dimensional embeddings is a (d, T) tensor. Multi-head attention follows
the scaled dot-product formulation; per-head attention weights are stored
as (keys, queries) matrices so that every column is one query's
distribution over the keys and sums to 1. Co-attention computes a single
set of attention weights from all channels (summed per-channel query/key
inner products, scaled by sqrt(C * d_k / h)) and lets several value paths
reuse it.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from math import sqrt
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor


# Counters for structural tests: how many times attention weights were
# computed since the last reset, per kind.
_weight_computations = {"ma": 0, "mca": 0}


def reset_weight_counters() -> None:
    _weight_computations["ma"] = 0
    _weight_computations["mca"] = 0


def weight_counters() -> dict:
    return dict(_weight_computations)


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------


@dataclass
class LayerNormParams:
    """Per-dimension affine applied after column standardization."""

    gain: Tensor
    bias: Tensor
    eps: float = 1e-5

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("layer norm eps must be positive")
        if self.gain.shape != self.bias.shape or self.gain.shape[1] != 1:
            raise ShapeError(f"layer norm affine needs matching column vectors, got {self.gain.shape} / {self.bias.shape}")


@dataclass
class FrontendParams:
    """Linear projection of raw features into the embedding space."""

    weight: Tensor  # (d_out, d_in)
    bias: Tensor    # (d_out, 1)


@dataclass
class QKHeadParams:
    w_query: Tensor
    b_query: Tensor
    w_key: Tensor
    b_key: Tensor


@dataclass
class QKParams:
    """Query/key projections for all heads (one shared set per attention)."""

    heads: list[QKHeadParams]


@dataclass
class ValueHeadParams:
    w_value: Tensor
    b_value: Tensor


@dataclass
class VOParams:
    """Per-head value projections plus the output projection."""

    heads: list[ValueHeadParams]
    w_out: Tensor
    b_out: Tensor


@dataclass
class AttentionParams:
    """Full multi-head attention bundle: query/key set plus value/output set."""

    qk: QKParams
    vo: VOParams

    @property
    def n_heads(self) -> int:
        return len(self.qk.heads)


@dataclass
class FfnParams:
    """Two fully connected layers with a ramp in between."""

    w_hidden: Tensor  # (d_hidden, d)
    b_hidden: Tensor
    w_out: Tensor     # (d, d_hidden)
    b_out: Tensor


# ---------------------------------------------------------------------------
# Initializers
# ---------------------------------------------------------------------------


def _xavier(rng: np.random.Generator, rows: int, cols: int, dtype) -> Tensor:
    limit = sqrt(6.0 / (rows + cols))
    return Tensor(rng.uniform(-limit, limit, size=(rows, cols)).astype(dtype), requires_grad=True)


def _zeros(rows: int, dtype) -> Tensor:
    return Tensor(np.zeros((rows, 1), dtype=dtype), requires_grad=True)


def init_layer_norm(dim: int, dtype=np.float64, eps: float = 1e-5) -> LayerNormParams:
    return LayerNormParams(
        gain=Tensor(np.ones((dim, 1), dtype=dtype), requires_grad=True),
        bias=Tensor(np.zeros((dim, 1), dtype=dtype), requires_grad=True),
        eps=eps,
    )


def init_frontend(d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float64) -> FrontendParams:
    return FrontendParams(weight=_xavier(rng, d_out, d_in, dtype), bias=_zeros(d_out, dtype))


def init_qk(d_key: int, n_heads: int, rng: np.random.Generator, dtype=np.float64) -> QKParams:
    if d_key % n_heads != 0:
        raise ShapeError(f"key dim {d_key} not divisible by {n_heads} heads")
    rows = d_key // n_heads
    heads = [
        QKHeadParams(
            w_query=_xavier(rng, rows, d_key, dtype),
            b_query=_zeros(rows, dtype),
            w_key=_xavier(rng, rows, d_key, dtype),
            b_key=_zeros(rows, dtype),
        )
        for _ in range(n_heads)
    ]
    return QKParams(heads=heads)


def init_vo(d_value: int, n_heads: int, rng: np.random.Generator, dtype=np.float64) -> VOParams:
    if d_value % n_heads != 0:
        raise ShapeError(f"value dim {d_value} not divisible by {n_heads} heads")
    rows = d_value // n_heads
    heads = [
        ValueHeadParams(w_value=_xavier(rng, rows, d_value, dtype), b_value=_zeros(rows, dtype))
        for _ in range(n_heads)
    ]
    return VOParams(heads=heads, w_out=_xavier(rng, d_value, d_value, dtype), b_out=_zeros(d_value, dtype))


def init_attention(d_key: int, d_value: int, n_heads: int, rng: np.random.Generator, dtype=np.float64) -> AttentionParams:
    return AttentionParams(qk=init_qk(d_key, n_heads, rng, dtype), vo=init_vo(d_value, n_heads, rng, dtype))


def init_ffn(d: int, d_hidden: int, rng: np.random.Generator, dtype=np.float64) -> FfnParams:
    return FfnParams(
        w_hidden=_xavier(rng, d_hidden, d, dtype),
        b_hidden=_zeros(d_hidden, dtype),
        w_out=_xavier(rng, d, d_hidden, dtype),
        b_out=_zeros(d, dtype),
    )


# ---------------------------------------------------------------------------
# Forward functions
# ---------------------------------------------------------------------------


def layer_norm(e: Tensor, p: LayerNormParams) -> Tensor:
    """Standardize each column to zero mean / unit variance, then affine.

    Fused op: one tape record with the classic layer-norm backward rule.
    """
    if e.data.ndim != 2 or e.shape[0] != p.gain.shape[0]:
        raise ShapeError(f"layer_norm dim mismatch: input {e.shape} vs affine {p.gain.shape}")
    x = e.data
    mu = x.mean(axis=0, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=0, keepdims=True)
    inv = 1.0 / np.sqrt(var + p.eps)
    xhat = xc * inv
    out = p.gain.data * xhat + p.bias.data
    gain, bias = p.gain, p.bias

    def rule(g):
        d = x.shape[0]
        dxhat = g * gain.data
        dx = inv * (dxhat - dxhat.mean(axis=0, keepdims=True) - xhat * (dxhat * xhat).mean(axis=0, keepdims=True))
        return (
            (e, dx),
            (gain, (g * xhat).sum(axis=1, keepdims=True)),
            (bias, g.sum(axis=1, keepdims=True)),
        )

    return ag.record_op(out, (e, gain, bias), rule)


def frontend(x: Tensor, p: FrontendParams, ln: LayerNormParams) -> Tensor:
    """Project raw features to embeddings: LN(W x + b 1^T)."""
    if x.shape[0] != p.weight.shape[1]:
        raise ShapeError(f"frontend expects {p.weight.shape[1]} feature rows, got {x.shape[0]}")
    return layer_norm(ag.add(ag.matmul(p.weight, x), p.bias), ln)


def feed_forward(e: Tensor, p: FfnParams) -> Tensor:
    """Two linear layers with a ramp: W2 [W1 e + b1]_+ + b2."""
    hidden = ag.relu(ag.add(ag.matmul(p.w_hidden, e), p.b_hidden))
    return ag.add(ag.matmul(p.w_out, hidden), p.b_out)


def _head_projection(w: Tensor, b: Tensor, x: Tensor) -> Tensor:
    return ag.add(ag.matmul(w, x), b)


def attention_weights(query: Tensor, key: Tensor, qk: QKParams) -> list[Tensor]:
    """Per-head attention weights for single-channel attention.

    Returns h matrices of shape (T_key, T_query); every column is one query
    frame's distribution over the key frames.
    """
    _weight_computations["ma"] += 1
    weights = []
    for head in qk.heads:
        q = _head_projection(head.w_query, head.b_query, query)
        k = _head_projection(head.w_key, head.b_key, key)
        logits = ag.scale(ag.matmul(ag.transpose(k), q), 1.0 / sqrt(q.shape[0]))
        weights.append(ag.softmax_columns(logits))
    return weights


def co_attention_weights(queries: Sequence[Tensor], keys: Sequence[Tensor], qk: QKParams) -> list[Tensor]:
    """Per-head co-attention weights from multi-channel queries and keys.

    Logits are the sum over channels of per-channel query/key inner products
    (all channels share the projection set), scaled by sqrt(C * d_k / h).
    """
    if len(queries) == 0 or len(queries) != len(keys):
        raise ShapeError(f"co-attention needs matching non-empty channel lists, got {len(queries)} queries / {len(keys)} keys")
    n_frames = queries[0].shape[1]
    if any(q.shape[1] != n_frames for q in queries) or any(k.shape[1] != n_frames for k in keys):
        raise ShapeError("co-attention channels must share the frame count")
    _weight_computations["mca"] += 1
    n_channels = len(queries)
    weights = []
    for head in qk.heads:
        logits = None
        for q_c, k_c in zip(queries, keys):
            q = _head_projection(head.w_query, head.b_query, q_c)
            k = _head_projection(head.w_key, head.b_key, k_c)
            term = ag.matmul(ag.transpose(k), q)
            logits = term if logits is None else ag.add(logits, term)
        rows = qk.heads[0].w_query.shape[0]
        logits = ag.scale(logits, 1.0 / sqrt(n_channels * rows))
        weights.append(ag.softmax_columns(logits))
    return weights


def attend(value: Tensor, weights: Sequence[Tensor], vo: VOParams) -> Tensor:
    """Mix values with precomputed per-head weights and project the stack."""
    if len(weights) != len(vo.heads):
        raise ShapeError(f"{len(weights)} weight heads vs {len(vo.heads)} value heads")
    outs = []
    for head, a in zip(vo.heads, weights):
        v = _head_projection(head.w_value, head.b_value, value)
        outs.append(ag.matmul(v, a))
    stacked = ag.concat_rows(outs) if len(outs) > 1 else outs[0]
    return ag.add(ag.matmul(vo.w_out, stacked), vo.b_out)


def multi_head_attention(query: Tensor, key: Tensor, value: Tensor, p: AttentionParams) -> Tensor:
    """Multi-head scaled dot-product attention over frames."""
    if query.shape[1] < 1 or key.shape[1] < 1:
        raise ShapeError("attention needs at least one query and one key frame")
    if key.shape[1] != value.shape[1]:
        raise ShapeError(f"key frames {key.shape[1]} != value frames {value.shape[1]}")
    return attend(value, attention_weights(query, key, p.qk), p.vo)


def multi_head_co_attention(
    queries: Sequence[Tensor], keys: Sequence[Tensor], value: Tensor, p: AttentionParams
) -> Tensor:
    """Co-attention: channel-summed attention weights, single value path."""
    weights = co_attention_weights(queries, keys, p.qk)
    return attend(value, weights, p.vo)
