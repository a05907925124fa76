"""Attractor head: turn frame embeddings into per-speaker attractors and posteriors.

A recurrent encoder consumes the frame embeddings (optionally in shuffled
order during training); its final state initializes a recurrent decoder that
is stepped once per speaker with zero input vectors. The decoder's hidden
states are the attractor columns, and the speech-activity posteriors are the
sigmoid of attractor/embedding dot products.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor


@dataclass
class GatedCellParams:
    """Standard gated recurrent cell (input/forget/cell/output gates).

    ``w_input`` and ``w_hidden`` stack the four gate projections row-wise;
    ``bias`` likewise. Hidden size equals input size.
    """

    w_input: Tensor   # (4*dim, dim)
    w_hidden: Tensor  # (4*dim, dim)
    bias: Tensor      # (4*dim, 1)

    @property
    def dim(self) -> int:
        return self.w_hidden.shape[1]


@dataclass
class EdaParams:
    encoder: GatedCellParams
    decoder: GatedCellParams

    @property
    def dim(self) -> int:
        return self.encoder.dim


def init_gated_cell(dim: int, rng: np.random.Generator, dtype=np.float64) -> GatedCellParams:
    limit = np.sqrt(6.0 / (2 * dim))
    return GatedCellParams(
        w_input=Tensor(rng.uniform(-limit, limit, size=(4 * dim, dim)).astype(dtype), requires_grad=True),
        w_hidden=Tensor(rng.uniform(-limit, limit, size=(4 * dim, dim)).astype(dtype), requires_grad=True),
        bias=Tensor(np.zeros((4 * dim, 1), dtype=dtype), requires_grad=True),
    )


def init_eda(dim: int, rng: np.random.Generator, dtype=np.float64) -> EdaParams:
    return EdaParams(encoder=init_gated_cell(dim, rng, dtype), decoder=init_gated_cell(dim, rng, dtype))


def _cell_step(pre: Tensor, cell_state: Tensor, dim: int) -> tuple[Tensor, Tensor]:
    """One gated update from stacked pre-activations; returns (hidden, cell)."""
    gate_in = ag.sigmoid(ag.slice_rows(pre, 0, dim))
    gate_forget = ag.sigmoid(ag.slice_rows(pre, dim, 2 * dim))
    candidate = ag.tanh(ag.slice_rows(pre, 2 * dim, 3 * dim))
    gate_out = ag.sigmoid(ag.slice_rows(pre, 3 * dim, 4 * dim))
    new_cell = ag.add(ag.mul(gate_forget, cell_state), ag.mul(gate_in, candidate))
    return ag.mul(gate_out, ag.tanh(new_cell)), new_cell


def run_encoder(e: Tensor, cell: GatedCellParams, order: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Consume the embedding columns (optionally reordered); return final state."""
    dim = cell.dim
    if e.shape[0] != dim:
        raise ShapeError(f"embeddings have {e.shape[0]} rows, cell expects {dim}")
    seq = ag.permute_cols(e, order) if order is not None else e
    # Input projections for all frames at once; per step only the recurrent part.
    projected = ag.add(ag.matmul(cell.w_input, seq), cell.bias)
    hidden = Tensor(np.zeros((dim, 1), dtype=e.dtype))
    cell_state = Tensor(np.zeros((dim, 1), dtype=e.dtype))
    for t in range(e.shape[1]):
        pre = ag.add(ag.slice_cols(projected, t, t + 1), ag.matmul(cell.w_hidden, hidden))
        hidden, cell_state = _cell_step(pre, cell_state, dim)
    return hidden, cell_state


def compute_attractors(
    e: Tensor,
    p: EdaParams,
    n_speakers: int,
    shuffle: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Attractor matrix, one column per speaker.

    Frame shuffling is a training-time regularizer; inference runs with the
    natural frame order and is deterministic.
    """
    if e.shape[1] < 1:
        raise ShapeError("need at least one frame")
    order = None
    if shuffle:
        if rng is None:
            raise ValueError("shuffle needs an rng")
        order = rng.permutation(e.shape[1])
    hidden, cell_state = run_encoder(e, p.encoder, order)
    dim = p.dim
    zero_in = ag.add(ag.matmul(p.decoder.w_input, Tensor(np.zeros((dim, 1), dtype=e.dtype))), p.decoder.bias)
    columns = []
    for _ in range(n_speakers):
        pre = ag.add(zero_in, ag.matmul(p.decoder.w_hidden, hidden))
        hidden, cell_state2 = _cell_step(pre, cell_state, dim)
        cell_state = cell_state2
        columns.append(hidden)
    return ag.concat_cols(columns) if n_speakers > 1 else columns[0]


def compute_posteriors(attractors: Tensor, e: Tensor) -> Tensor:
    """Frame-wise speech activity probabilities: sigmoid of B^T E."""
    if attractors.shape[0] != e.shape[0]:
        raise ShapeError(f"attractor dim {attractors.shape[0]} != embedding dim {e.shape[0]}")
    return ag.sigmoid(ag.matmul(ag.transpose(attractors), e))
