"""Dense tensors with tape-based reverse-mode automatic differentiation.

Everything the diarization models need is expressed with the small op set
below: matrix products, column-wise softmax, a handful of element-wise
functions, and shape rearrangements. Each op validates its operands, computes
the forward value with numpy, and (when a tape is active and some input
requires a gradient) records a backward rule on the tape. ``backward`` walks
the tape in reverse execution order and accumulates gradients into the
``grad`` field of every leaf tensor that requires one.

Broadcasting is deliberately restricted to adding/subtracting a column
vector across the columns of a matrix (the bias pattern); anything wider is
rejected so the backward rules stay small and auditable.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "backward",
    "grad_check",
    "GradCheckReport",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "sigmoid",
    "relu",
    "tanh",
    "log",
    "clip",
    "softmax_columns",
    "transpose",
    "concat_rows",
    "concat_cols",
    "slice_rows",
    "slice_cols",
    "permute_cols",
    "mean_over_axis",
    "mean_tensors",
    "sum_all",
    "record_op",
]

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class Tensor:
    """A dense array plus an optional gradient accumulator.

    Leaves created with ``requires_grad=True`` get a zero-initialized ``grad``
    of the same shape. Tensors produced by ops while a tape is active carry a
    reference to that tape; their gradients flow through ``backward`` but are
    not retained afterwards.
    """

    __slots__ = ("data", "requires_grad", "grad", "tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad[...] = 0.0

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; all arithmetic goes through the module-level ops so
    # recording and shape checks live in one place.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class _Record:
    """One executed op: its output, inputs, and backward rule."""

    __slots__ = ("output", "inputs", "rule")

    def __init__(self, output: Tensor, inputs: tuple[Tensor, ...], rule):
        self.output = output
        self.inputs = inputs
        self.rule = rule


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of executed ops, replayed in reverse by ``backward``."""

    def __init__(self):
        self._records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tapes must be closed in nesting order"

    def __len__(self) -> int:
        return len(self._records)

    def recorded_output_floats(self) -> int:
        """Total float count of all op outputs retained on this tape."""
        return sum(rec.output.data.size for rec in self._records)

    def recorded_output_bytes(self) -> int:
        return sum(rec.output.data.nbytes for rec in self._records)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record_op(out_data: np.ndarray, inputs: Sequence[Tensor], rule) -> Tensor:
    """Wrap ``out_data`` in a Tensor, recording ``rule`` if a tape is active.

    ``rule(g)`` receives the output gradient and must return an iterable of
    ``(input_tensor, gradient_array)`` pairs. Fused ops (layer norm, softmax)
    use this entry point; so do all the primitives below.
    """
    out = Tensor(out_data)
    if _TAPE_STACK and any(t.requires_grad for t in inputs):
        tape = _TAPE_STACK[-1]
        out.requires_grad = True
        out.grad = None  # intermediate: allocated lazily during backward
        out.tape = tape
        tape._records.append(_Record(out, tuple(inputs), rule))
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf.

    The loss must be a single-element tensor produced on a tape. Repeated
    calls keep accumulating into leaf gradients until they are zeroed.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape is None:
        raise ValueError("backward needs a loss attached to a tape (got a detached tensor)")
    flow: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(loss.tape._records):
        g = flow.pop(id(rec.output), None)
        if g is None:
            continue
        for t, dg in rec.rule(g):
            if not t.requires_grad:
                continue
            if t.tape is not None:
                key = id(t)
                if key in flow:
                    flow[key] = flow[key] + dg
                else:
                    flow[key] = dg
            else:
                t.accumulate_grad(dg)


# ---------------------------------------------------------------------------
# Primitive ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def rule(g):
        return ((a, g @ b.data.T), (b, a.data.T @ g))

    return record_op(out, (a, b), rule)


def _is_column_bias(full: tuple[int, ...], vec: tuple[int, ...]) -> bool:
    return len(full) == 2 and len(vec) == 2 and vec == (full[0], 1) and full[1] != 1


def add(a: Tensor, b) -> Tensor:
    """Element-wise sum; also covers the column-bias broadcast and scalar shift."""
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        c = float(b)

        def rule_s(g):
            return ((a, g),)

        return record_op(a.data + c, (a,), rule_s)
    b = _as_tensor(b)
    if a.shape == b.shape:
        def rule(g):
            return ((a, g), (b, g))

        return record_op(a.data + b.data, (a, b), rule)
    if _is_column_bias(a.shape, b.shape):
        def rule_bias(g):
            return ((a, g), (b, g.sum(axis=1, keepdims=True)))

        return record_op(a.data + b.data, (a, b), rule_bias)
    if _is_column_bias(b.shape, a.shape):
        def rule_bias2(g):
            return ((a, g.sum(axis=1, keepdims=True)), (b, g))

        return record_op(a.data + b.data, (a, b), rule_bias2)
    raise ShapeError(f"add supports equal shapes or a column-bias broadcast, got {a.shape} + {b.shape}")


def sub(a: Tensor, b) -> Tensor:
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        return add(a, -float(b))
    b = _as_tensor(b)
    if a.shape == b.shape:
        def rule(g):
            return ((a, g), (b, -g))

        return record_op(a.data - b.data, (a, b), rule)
    if _is_column_bias(a.shape, b.shape):
        def rule_bias(g):
            return ((a, g), (b, -g.sum(axis=1, keepdims=True)))

        return record_op(a.data - b.data, (a, b), rule_bias)
    raise ShapeError(f"sub supports equal shapes or a column-bias broadcast, got {a.shape} - {b.shape}")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product of equal-shape tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul needs equal shapes, got {a.shape} * {b.shape}")
    out = a.data * b.data

    def rule(g):
        return ((a, g * b.data), (b, g * a.data))

    return record_op(out, (a, b), rule)


def scale(a: Tensor, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)

    def rule(g):
        return ((a, g * s),)

    return record_op(a.data * s, (a,), rule)


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    # Evaluated in halves to avoid exp overflow on large negatives.
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ex = np.exp(a.data[~pos])
    out[~pos] = ex / (1.0 + ex)

    def rule(g):
        return ((a, g * out * (1.0 - out)),)

    return record_op(out, (a,), rule)


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0  # subgradient at 0 is 0

    def rule(g):
        return ((a, g * mask),)

    return record_op(np.where(mask, a.data, 0.0), (a,), rule)


def tanh(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)

    def rule(g):
        return ((a, g * (1.0 - out * out)),)

    return record_op(out, (a,), rule)


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log needs strictly positive input")
    out = np.log(a.data)

    def rule(g):
        return ((a, g / a.data),)

    return record_op(out, (a,), rule)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes through the interior only."""
    a = _as_tensor(a)
    out = np.clip(a.data, lo, hi)
    interior = (a.data > lo) & (a.data < hi)

    def rule(g):
        return ((a, g * interior),)

    return record_op(out, (a,), rule)


def softmax_columns(m: Tensor) -> Tensor:
    """Numerically stabilized softmax down each column."""
    m = _as_tensor(m)
    if m.data.ndim != 2:
        raise ShapeError(f"softmax_columns needs a matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m.data)):
        raise ValueError("softmax_columns rejects non-finite input")
    z = m.data - m.data.max(axis=0, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=0, keepdims=True)

    def rule(g):
        # d/dx softmax: y * (g - sum_col(g * y))
        return ((m, out * (g - (g * out).sum(axis=0, keepdims=True))),)

    return record_op(out, (m,), rule)


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got shape {a.shape}")

    def rule(g):
        return ((a, g.T),)

    return record_op(a.data.T.copy(), (a,), rule)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat_rows needs at least one tensor")
    cols = parts[0].shape[1]
    if any(p.data.ndim != 2 or p.shape[1] != cols for p in parts):
        raise ShapeError(f"concat_rows needs matching column counts, got {[p.shape for p in parts]}")
    out = np.concatenate([p.data for p in parts], axis=0)
    splits = np.cumsum([p.shape[0] for p in parts])[:-1]

    def rule(g):
        pieces = np.split(g, splits, axis=0)
        return tuple(zip(parts, pieces))

    return record_op(out, tuple(parts), rule)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat_cols needs at least one tensor")
    rows = parts[0].shape[0]
    if any(p.data.ndim != 2 or p.shape[0] != rows for p in parts):
        raise ShapeError(f"concat_cols needs matching row counts, got {[p.shape for p in parts]}")
    out = np.concatenate([p.data for p in parts], axis=1)
    splits = np.cumsum([p.shape[1] for p in parts])[:-1]

    def rule(g):
        pieces = np.split(g, splits, axis=1)
        return tuple(zip(parts, pieces))

    return record_op(out, tuple(parts), rule)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2 or not (0 <= start < stop <= a.shape[0]):
        raise ShapeError(f"slice_rows [{start}:{stop}] invalid for shape {a.shape}")

    def rule(g):
        full = np.zeros_like(a.data)
        full[start:stop, :] = g
        return ((a, full),)

    return record_op(a.data[start:stop, :].copy(), (a,), rule)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2 or not (0 <= start < stop <= a.shape[1]):
        raise ShapeError(f"slice_cols [{start}:{stop}] invalid for shape {a.shape}")

    def rule(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return ((a, full),)

    return record_op(a.data[:, start:stop].copy(), (a,), rule)


def permute_cols(a: Tensor, perm: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    perm = np.asarray(perm, dtype=int)
    if a.data.ndim != 2 or perm.shape != (a.shape[1],) or sorted(perm) != list(range(a.shape[1])):
        raise ShapeError(f"permute_cols needs a permutation of {a.shape[1]} columns")

    def rule(g):
        full = np.empty_like(a.data)
        full[:, perm] = g
        return ((a, full),)

    return record_op(a.data[:, perm].copy(), (a,), rule)


def mean_over_axis(a: Tensor, axis: int) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2 or axis not in (0, 1):
        raise ShapeError(f"mean_over_axis axis={axis} invalid for shape {a.shape}")
    n = a.shape[axis]
    out = a.data.mean(axis=axis, keepdims=True)

    def rule(g):
        return ((a, np.broadcast_to(g / n, a.shape).copy()),)

    return record_op(out, (a,), rule)


def mean_tensors(parts: Sequence[Tensor]) -> Tensor:
    """Mean over a list of same-shape tensors (the channel-average pattern)."""
    if not parts:
        raise ShapeError("mean_tensors needs at least one tensor")
    total = parts[0]
    for p in parts[1:]:
        total = add(total, p)
    return scale(total, 1.0 / len(parts))


def sum_all(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.asarray(a.data.sum())

    def rule(g):
        return ((a, np.broadcast_to(g, a.shape).astype(a.data.dtype, copy=True)),)

    return record_op(out, (a,), rule)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


class GradCheckReport:
    """Outcome of one finite-difference comparison."""

    __slots__ = ("max_rel_err", "tol", "passed", "n_coords")

    def __init__(self, max_rel_err: float, tol: float, n_coords: int):
        self.max_rel_err = max_rel_err
        self.tol = tol
        self.passed = max_rel_err <= tol
        self.n_coords = n_coords

    def __repr__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return f"GradCheckReport({status}, max_rel_err={self.max_rel_err:.3e}, tol={self.tol:.1e}, coords={self.n_coords})"


def grad_check(
    f: Callable[[], Tensor],
    wrt: Sequence[Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
    max_coords_per_tensor: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare tape gradients of scalar-valued ``f`` against central differences.

    ``f`` is re-evaluated with perturbed copies of the ``wrt`` tensors, which
    must all be float64 leaves. The relative error of a coordinate is
    ``|g_tape - g_fd| / max(|g_tape|, |g_fd|, 1)``. When
    ``max_coords_per_tensor`` is set, a random subsample of coordinates is
    checked per tensor (for large parameter sets).
    """
    for t in wrt:
        if not t.requires_grad:
            raise ValueError("grad_check targets must require gradients")
        if t.dtype != np.float64:
            raise ValueError("grad_check runs in 64-bit only")
        t.zero_grad()
    with Tape():
        loss = f()
    if loss.data.size != 1:
        raise ShapeError("grad_check needs a scalar-valued function")
    backward(loss)
    analytic = [t.grad.copy() for t in wrt]

    def eval_loss() -> float:
        return float(f().data.reshape(()))

    max_rel = 0.0
    n_checked = 0
    for t, g in zip(wrt, analytic):
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        idxs = np.arange(flat.size)
        if max_coords_per_tensor is not None and flat.size > max_coords_per_tensor:
            if rng is None:
                rng = np.random.default_rng(0)
            idxs = rng.choice(flat.size, size=max_coords_per_tensor, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + step
            up = eval_loss()
            flat[i] = orig - step
            down = eval_loss()
            flat[i] = orig
            fd = (up - down) / (2.0 * step)
            rel = abs(gflat[i] - fd) / max(abs(gflat[i]), abs(fd), 1.0)
            if rel > max_rel:
                max_rel = rel
            n_checked += 1
    return GradCheckReport(max_rel, tol, n_checked)
