"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every learned transformation in the package is expressed through the
primitives here, so one backward sweep yields analytic gradients for all
parameters.  Forward values are plain numpy arrays; an operation is recorded
only while a Tape is active and at least one operand is tracked.

Reductions that fold away a point index an operation must be blind to
(attention value sums, neighbor means) go through `math.fsum`, which returns
the correctly rounded sum and is therefore exactly order-independent.  Plain
BLAS reductions are kept everywhere the reduced axis has a fixed order.
"""

from __future__ import annotations

import math
import struct
from typing import Callable, Sequence

import numpy as np

from .errors import ArgumentError, CheckpointError, ContractError, ShapeError


class Tensor:
    """A float64 array plus a tracking flag.

    `tracked` marks values that gradients must flow through; it is set on
    parameters and propagates to everything computed from them.
    """

    __slots__ = ("data", "tracked")

    def __init__(self, data, tracked: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.tracked = bool(tracked)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.data.shape}, tracked={self.tracked})"


def constant(data) -> Tensor:
    """Untracked tensor; gradients stop here."""
    return Tensor(data, tracked=False)


class _Node:
    __slots__ = ("op", "inputs", "output", "forward_fn", "backward_fn")

    def __init__(self, op, inputs, output, forward_fn, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.forward_fn = forward_fn
        self.backward_fn = backward_fn


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Records primitive operations in execution order.

    Execution order is a topological order of the dataflow, so the backward
    pass is one reverse sweep visiting each node exactly once.  Each node
    keeps a recompute rule; `replay` re-runs them in order and verifies the
    stored forward values are reproduced exactly.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        if popped is not self:  # pragma: no cover - misuse guard
            raise ContractError("tape stack corrupted")
        return False

    def replay(self) -> bool:
        """Recompute every node from its inputs; True iff all outputs match bitwise."""
        for node in self.nodes:
            again = node.forward_fn()
            if not np.array_equal(np.asarray(again), node.output.data):
                return False
        return True

    def first_nonfinite(self) -> str | None:
        """Name of the earliest op whose output holds NaN/Inf, if any."""
        for node in self.nodes:
            if not np.all(np.isfinite(node.output.data)):
                return node.op
        return None


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _record(op, inputs, out_data, forward_fn, backward_fn) -> Tensor:
    tracked = any(t.tracked for t in inputs)
    out = Tensor(out_data, tracked=tracked)
    tape = _active_tape()
    if tape is not None and tracked:
        tape.nodes.append(_Node(op, tuple(inputs), out, forward_fn, backward_fn))
    return out


class ParamBlock:
    """Named learnable tensor with its accumulated gradient."""

    __slots__ = ("name", "tensor", "grad")

    def __init__(self, name: str, tensor: Tensor):
        tensor.tracked = True
        self.name = name
        self.tensor = tensor
        self.grad = np.zeros_like(tensor.data)

    def __repr__(self):  # pragma: no cover
        return f"ParamBlock({self.name!r}, shape={self.tensor.shape})"


def zero_grads(params: Sequence[ParamBlock]) -> None:
    for pb in params:
        pb.grad[...] = 0.0


def backward(loss: Tensor, tape: Tape, params: Sequence[ParamBlock]) -> None:
    """Accumulate d(loss)/d(param) into every ParamBlock.grad.

    Gradients add onto whatever is already in `grad`; callers zero them
    between steps.  `loss` must be a tracked scalar produced on `tape`.
    """
    if loss.data.shape != ():
        raise ContractError(f"loss must be scalar, got shape {loss.data.shape}")
    if not loss.tracked:
        raise ContractError("loss is not tracked; nothing to differentiate")
    for node in reversed(tape.nodes):
        if node.output is loss:
            break
    else:
        raise ContractError("loss was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward_fn(np.asarray(g))
        for t, ig in zip(node.inputs, in_grads):
            if ig is None or not t.tracked:
                continue
            prev = grads.get(id(t))
            # Never accumulate in place: numpy scalars are immutable and
            # returned arrays may be shared.
            grads[id(t)] = ig if prev is None else prev + ig
    for pb in params:
        g = grads.get(id(pb.tensor))
        if g is not None:
            pb.grad += g


def sgd_step(params: Sequence[ParamBlock], lr: float) -> None:
    """Plain gradient-descent update: tensor <- tensor - lr * grad."""
    if lr <= 0:
        raise ArgumentError(f"lr must be positive, got {lr}")
    for pb in params:
        pb.tensor.data -= lr * pb.grad


class MomentumSgd:
    """SGD with classical momentum; velocity state lives here."""

    def __init__(self, params: Sequence[ParamBlock], lr: float, momentum: float = 0.9):
        if lr <= 0:
            raise ArgumentError(f"lr must be positive, got {lr}")
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self._velocity = [np.zeros_like(pb.grad) for pb in self.params]

    def step(self) -> None:
        for pb, v in zip(self.params, self._velocity):
            v *= self.momentum
            v += pb.grad
            pb.tensor.data -= self.lr * v

    def zero_grads(self) -> None:
        zero_grads(self.params)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def _fsum_cols(x: np.ndarray) -> np.ndarray:
    # Correctly rounded per-column sums: invariant to row order by construction.
    return np.array([math.fsum(col) for col in x.T], dtype=np.float64)


def _ordered_sum(x: np.ndarray, axis: int) -> np.ndarray:
    # Sorting first fixes a canonical summation order, so the (pairwise) sum
    # is exactly invariant to any permutation along the reduced axis.
    return np.sort(x, axis=axis).sum(axis=axis)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; 1-D operands act as row/column vectors like np.matmul."""
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim == 0 or ad.ndim > 2 or bd.ndim > 2:
        raise ShapeError(f"matmul supports 1-D/2-D operands, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {ad.shape} @ {bd.shape}")
    out = ad @ bd

    def fwd():
        return a.data @ b.data

    def bwd(g):
        av, bv = a.data, b.data
        if av.ndim == 2 and bv.ndim == 2:
            return g @ bv.T, av.T @ g
        if av.ndim == 1 and bv.ndim == 2:
            return bv @ g, np.outer(av, g)
        if av.ndim == 2 and bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        return g * bv, g * av

    return _record("matmul", (a, b), out, fwd, bwd)


def _binary_mode(ad: np.ndarray, bd: np.ndarray, op: str) -> str:
    if ad.shape == bd.shape:
        return "same"
    if ad.ndim == 2 and bd.ndim == 1 and ad.shape[1] == bd.shape[0]:
        return "brows"  # b broadcast across rows of a
    if ad.ndim == 1 and bd.ndim == 2 and bd.shape[1] == ad.shape[0]:
        return "arows"  # a broadcast across rows of b
    raise ShapeError(f"{op}: incompatible shapes {ad.shape} and {bd.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    mode = _binary_mode(a.data, b.data, "add")
    out = a.data + b.data

    def fwd():
        return a.data + b.data

    def bwd(g):
        if mode == "same":
            return g.copy(), g.copy()
        if mode == "brows":
            return g.copy(), g.sum(axis=0)
        return g.sum(axis=0), g.copy()

    return _record("add", (a, b), out, fwd, bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    mode = _binary_mode(a.data, b.data, "sub")
    out = a.data - b.data

    def fwd():
        return a.data - b.data

    def bwd(g):
        if mode == "same":
            return g.copy(), -g
        if mode == "brows":
            return g.copy(), -g.sum(axis=0)
        return g.sum(axis=0), -g

    return _record("sub", (a, b), out, fwd, bwd)


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    mode = _binary_mode(a.data, b.data, "hadamard")
    out = a.data * b.data

    def fwd():
        return a.data * b.data

    def bwd(g):
        ga = g * b.data
        gb = g * a.data
        if mode == "brows":
            return ga, gb.sum(axis=0)
        if mode == "arows":
            return ga.sum(axis=0), gb
        return ga, gb

    return _record("hadamard", (a, b), out, fwd, bwd)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def fwd():
        return np.maximum(x.data, 0.0)

    def bwd(g):
        return (g * (x.data > 0.0),)

    return _record("relu", (x,), out, fwd, bwd)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def fwd():
        return np.tanh(x.data)

    def bwd(g):
        return (g * (1.0 - out * out),)

    return _record("tanh", (x,), out, fwd, bwd)


def sqrt(x: Tensor) -> Tensor:
    """Elementwise square root; subgradient 0 at x == 0."""
    out = np.sqrt(x.data)

    def fwd():
        return np.sqrt(x.data)

    def bwd(g):
        safe = np.where(x.data > 0.0, out, 1.0)
        return (np.where(x.data > 0.0, g / (2.0 * safe), 0.0),)

    return _record("sqrt", (x,), out, fwd, bwd)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = x.data * c

    def fwd():
        return x.data * c

    def bwd(g):
        return (g * c,)

    return _record("scale", (x,), out, fwd, bwd)


def neg(x: Tensor) -> Tensor:
    return scale(x, -1.0)


def add_scalar(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = x.data + c

    def fwd():
        return x.data + c

    def bwd(g):
        return (g.copy(),)

    return _record("add_scalar", (x,), out, fwd, bwd)


def elementwise(op: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    """Dispatch table over the named elementwise operations."""
    binary = {"add": add, "sub": sub, "hadamard": hadamard}
    unary = {"relu": relu, "tanh": tanh}
    if op in binary:
        if b is None:
            raise ArgumentError(f"{op} needs two operands")
        return binary[op](a, b)
    if op in unary:
        if b is not None:
            raise ArgumentError(f"{op} takes one operand")
        return unary[op](a)
    raise ArgumentError(f"unknown elementwise op {op!r}")


def softmax(x: Tensor) -> Tensor:
    """Stable softmax of a 1-D tensor; outputs sum to 1 within 1e-12."""
    if x.data.ndim != 1 or x.data.size == 0:
        raise ShapeError(f"softmax needs a nonempty 1-D tensor, got shape {x.data.shape}")

    def compute(v):
        e = np.exp(v - v.max())
        return e / math.fsum(e)

    out = compute(x.data)

    def fwd():
        return compute(x.data)

    def bwd(g):
        dot = float((g * out).sum())
        return (out * (g - dot),)

    return _record("softmax", (x,), out, fwd, bwd)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise stable softmax of a 2-D tensor."""
    if x.data.ndim != 2 or x.data.shape[1] == 0:
        raise ShapeError(f"softmax_rows needs a 2-D tensor, got shape {x.data.shape}")

    def compute(v):
        e = np.exp(v - v.max(axis=1, keepdims=True))
        denom = np.array([[math.fsum(row)] for row in e])
        return e / denom

    out = compute(x.data)

    def fwd():
        return compute(x.data)

    def bwd(g):
        dots = (g * out).sum(axis=1, keepdims=True)
        return (out * (g - dots),)

    return _record("softmax_rows", (x,), out, fwd, bwd)


def log_softmax(x: Tensor) -> Tensor:
    if x.data.ndim != 1 or x.data.size == 0:
        raise ShapeError(f"log_softmax needs a nonempty 1-D tensor, got {x.data.shape}")

    def compute(v):
        m = v.max()
        return v - (m + math.log(math.fsum(np.exp(v - m))))

    out = compute(x.data)

    def fwd():
        return compute(x.data)

    def bwd(g):
        return (g - np.exp(out) * g.sum(),)

    return _record("log_softmax", (x,), out, fwd, bwd)


def sum_all(x: Tensor) -> Tensor:
    out = np.float64(x.data.sum())

    def fwd():
        return np.float64(x.data.sum())

    def bwd(g):
        return (np.full_like(x.data, float(g)),)

    return _record("sum_all", (x,), out, fwd, bwd)


def sum_axis(x: Tensor, axis: int) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"sum_axis needs a 2-D tensor, got shape {x.data.shape}")
    out = x.data.sum(axis=axis)

    def fwd():
        return x.data.sum(axis=axis)

    def bwd(g):
        return (np.broadcast_to(np.expand_dims(g, axis), x.data.shape).copy(),)

    return _record("sum_axis", (x,), out, fwd, bwd)


def mean_rows(x: Tensor) -> Tensor:
    """Column means of a 2-D tensor, exactly invariant to row order."""
    if x.data.ndim != 2 or x.data.shape[0] == 0:
        raise ShapeError(f"mean_rows needs a nonempty 2-D tensor, got {x.data.shape}")
    n = x.data.shape[0]

    def compute(v):
        return _ordered_sum(v, 0) / n

    out = compute(x.data)

    def fwd():
        return compute(x.data)

    def bwd(g):
        return (np.tile(g / n, (n, 1)),)

    return _record("mean_rows", (x,), out, fwd, bwd)


def max_rows(x: Tensor) -> Tensor:
    """Column maxima of a 2-D tensor; gradient routes to the first argmax."""
    if x.data.ndim != 2 or x.data.shape[0] == 0:
        raise ShapeError(f"max_rows needs a nonempty 2-D tensor, got {x.data.shape}")
    out = x.data.max(axis=0)
    arg = np.argmax(x.data, axis=0)

    def fwd():
        return x.data.max(axis=0)

    def bwd(g):
        z = np.zeros_like(x.data)
        z[arg, np.arange(x.data.shape[1])] = g
        return (z,)

    return _record("max_rows", (x,), out, fwd, bwd)


def group_max(x: Tensor, group_size: int) -> Tensor:
    """Channelwise max over consecutive groups of `group_size` rows.

    (m*k, d) -> (m, d); the pooling PointNet-style layers use to collapse a
    region's points into one feature.
    """
    if x.data.ndim != 2:
        raise ShapeError(f"group_max needs a 2-D tensor, got shape {x.data.shape}")
    n, d = x.data.shape
    if group_size < 1 or n % group_size != 0:
        raise ShapeError(f"group_max: {n} rows not divisible into groups of {group_size}")
    m = n // group_size
    cube = x.data.reshape(m, group_size, d)
    out = cube.max(axis=1)
    arg = np.argmax(cube, axis=1)

    def fwd():
        return x.data.reshape(m, group_size, d).max(axis=1)

    def bwd(g):
        z = np.zeros((m, group_size, d), dtype=np.float64)
        mi, di = np.meshgrid(np.arange(m), np.arange(d), indexing="ij")
        z[mi, arg, di] = g
        return (z.reshape(n, d),)

    return _record("group_max", (x,), out, fwd, bwd)


def weighted_sum_rows(weights: Tensor, values: Tensor) -> Tensor:
    """sum_k weights[k] * values[k, :], correctly rounded over k.

    The reduction is order-independent, which makes attention aggregation
    exactly invariant to neighbor permutations.
    """
    if weights.data.ndim != 1 or values.data.ndim != 2 or weights.data.shape[0] != values.data.shape[0]:
        raise ShapeError(
            f"weighted_sum_rows: got weights {weights.data.shape}, values {values.data.shape}"
        )

    def compute(w, v):
        return _ordered_sum(w[:, None] * v, 0)

    out = compute(weights.data, values.data)

    def fwd():
        return compute(weights.data, values.data)

    def bwd(g):
        return (values.data @ g, np.outer(weights.data, g))

    return _record("weighted_sum_rows", (weights, values), out, fwd, bwd)


def mul_rows(x: Tensor, s: Tensor) -> Tensor:
    """Scale each row of x by the matching entry of s: out[i] = x[i] * s[i]."""
    if x.data.ndim != 2 or s.data.ndim != 1 or x.data.shape[0] != s.data.shape[0]:
        raise ShapeError(f"mul_rows: got x {x.data.shape}, s {s.data.shape}")

    out = x.data * s.data[:, None]

    def fwd():
        return x.data * s.data[:, None]

    def bwd(g):
        return (g * s.data[:, None], (g * x.data).sum(axis=1))

    return _record("mul_rows", (x, s), out, fwd, bwd)


def group_softmax(x: Tensor, group_size: int) -> Tensor:
    """Stable softmax over consecutive groups of `group_size` entries of a vector."""
    if x.data.ndim != 1:
        raise ShapeError(f"group_softmax needs a 1-D tensor, got shape {x.data.shape}")
    n = x.data.shape[0]
    if group_size < 1 or n % group_size != 0:
        raise ShapeError(f"group_softmax: {n} entries not divisible into groups of {group_size}")
    m = n // group_size

    def compute(v):
        rows = v.reshape(m, group_size)
        e = np.exp(rows - rows.max(axis=1, keepdims=True))
        return (e / _ordered_sum(e, 1)[:, None]).reshape(n)

    out = compute(x.data)

    def fwd():
        return compute(x.data)

    def bwd(g):
        y = out.reshape(m, group_size)
        gr = g.reshape(m, group_size)
        dots = (gr * y).sum(axis=1, keepdims=True)
        return ((y * (gr - dots)).reshape(n),)

    return _record("group_softmax", (x,), out, fwd, bwd)


def group_sum_rows(x: Tensor, group_size: int) -> Tensor:
    """Order-independent sums over consecutive row groups: (m*k, d) -> (m, d)."""
    if x.data.ndim != 2:
        raise ShapeError(f"group_sum_rows needs a 2-D tensor, got shape {x.data.shape}")
    n, d = x.data.shape
    if group_size < 1 or n % group_size != 0:
        raise ShapeError(f"group_sum_rows: {n} rows not divisible into groups of {group_size}")
    m = n // group_size

    def compute(v):
        return _ordered_sum(v.reshape(m, group_size, d), 1)

    out = compute(x.data)

    def fwd():
        return compute(x.data)

    def bwd(g):
        return (np.repeat(g, group_size, axis=0),)

    return _record("group_sum_rows", (x,), out, fwd, bwd)


def group_mean_rows(x: Tensor, group_size: int) -> Tensor:
    """Order-independent means over consecutive row groups: (m*k, d) -> (m, d)."""
    return scale(group_sum_rows(x, group_size), 1.0 / group_size)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat of zero tensors")
    nd = parts[0].data.ndim
    if any(p.data.ndim != nd for p in parts) or axis >= nd:
        raise ShapeError("concat: rank mismatch or bad axis")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def fwd():
        return np.concatenate([p.data for p in parts], axis=axis)

    def bwd(g):
        slicer = [slice(None)] * nd
        outs = []
        for i in range(len(parts)):
            slicer[axis] = slice(offsets[i], offsets[i + 1])
            outs.append(g[tuple(slicer)].copy())
        return tuple(outs)

    return _record("concat", tuple(parts), out, fwd, bwd)


def stack_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack 1-D tensors of equal length into a matrix, one per row."""
    parts = list(parts)
    if not parts or any(p.data.ndim != 1 for p in parts):
        raise ShapeError("stack_rows needs one or more 1-D tensors")
    out = np.stack([p.data for p in parts], axis=0)

    def fwd():
        return np.stack([p.data for p in parts], axis=0)

    def bwd(g):
        return tuple(g[i].copy() for i in range(len(parts)))

    return _record("stack_rows", tuple(parts), out, fwd, bwd)


def stack_scalars(parts: Sequence[Tensor]) -> Tensor:
    """Collect scalar tensors into a 1-D tensor."""
    parts = list(parts)
    if not parts or any(p.data.ndim != 0 for p in parts):
        raise ShapeError("stack_scalars needs one or more scalar tensors")
    out = np.array([float(p.data) for p in parts])

    def fwd():
        return np.array([float(p.data) for p in parts])

    def bwd(g):
        return tuple(np.asarray(g[i]) for i in range(len(parts)))

    return _record("stack_scalars", tuple(parts), out, fwd, bwd)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def fwd():
        return x.data.reshape(shape)

    def bwd(g):
        return (g.reshape(x.data.shape),)

    return _record("reshape", (x,), out, fwd, bwd)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D tensor, got shape {x.data.shape}")
    out = x.data.T.copy()

    def fwd():
        return x.data.T.copy()

    def bwd(g):
        return (g.T.copy(),)

    return _record("transpose", (x,), out, fwd, bwd)


def gather_rows(x: Tensor, indices) -> Tensor:
    """Select rows by index; duplicate indices accumulate gradient."""
    idx = np.asarray(indices, dtype=np.intp)
    if x.data.ndim != 2 or idx.ndim != 1:
        raise ShapeError(f"gather_rows needs a 2-D tensor and 1-D indices, got {x.data.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[0]):
        raise ArgumentError("gather_rows: index out of range")
    out = x.data[idx]

    def fwd():
        return x.data[idx]

    def bwd(g):
        z = np.zeros_like(x.data)
        np.add.at(z, idx, g)
        return (z,)

    return _record("gather_rows", (x,), out, fwd, bwd)


def take(x: Tensor, index: int) -> Tensor:
    if x.data.ndim != 1:
        raise ShapeError(f"take needs a 1-D tensor, got shape {x.data.shape}")
    index = int(index)
    if index < 0 or index >= x.data.shape[0]:
        raise ArgumentError(f"take: index {index} out of range for length {x.data.shape[0]}")
    out = np.float64(x.data[index])

    def fwd():
        return np.float64(x.data[index])

    def bwd(g):
        z = np.zeros_like(x.data)
        z[index] = float(g)
        return (z,)

    return _record("take", (x,), out, fwd, bwd)


def repeat_rows(x: Tensor, k: int) -> Tensor:
    """Repeat each row k times: (m, d) -> (m*k, d)."""
    if x.data.ndim != 2:
        raise ShapeError(f"repeat_rows needs a 2-D tensor, got shape {x.data.shape}")
    if k < 1:
        raise ArgumentError(f"repeat_rows: k must be >= 1, got {k}")
    m, d = x.data.shape
    out = np.repeat(x.data, k, axis=0)

    def fwd():
        return np.repeat(x.data, k, axis=0)

    def bwd(g):
        return (g.reshape(m, k, d).sum(axis=1),)

    return _record("repeat_rows", (x,), out, fwd, bwd)


def pairwise_matvec3(mats: Tensor, vecs: Tensor) -> Tensor:
    """Apply n row-encoded 3x3 matrices to n 3-vectors: (n,9),(n,3) -> (n,3)."""
    if mats.data.ndim != 2 or mats.data.shape[1] != 9:
        raise ShapeError(f"pairwise_matvec3: mats must be (n, 9), got {mats.data.shape}")
    if vecs.data.ndim != 2 or vecs.data.shape[1] != 3 or vecs.data.shape[0] != mats.data.shape[0]:
        raise ShapeError(f"pairwise_matvec3: vecs must be (n, 3), got {vecs.data.shape}")
    n = mats.data.shape[0]

    def compute(mv, vv):
        return np.einsum("nij,nj->ni", mv.reshape(n, 3, 3), vv)

    out = compute(mats.data, vecs.data)

    def fwd():
        return compute(mats.data, vecs.data)

    def bwd(g):
        m3 = mats.data.reshape(n, 3, 3)
        dm = np.einsum("ni,nj->nij", g, vecs.data).reshape(n, 9)
        dv = np.einsum("nij,ni->nj", m3, g)
        return (dm, dv)

    return _record("pairwise_matvec3", (mats, vecs), out, fwd, bwd)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

_ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": relu,
    "tanh": tanh,
    "identity": lambda t: t,
}


def mlp_forward(params: Sequence[ParamBlock], activations: Sequence[str], x: Tensor) -> Tensor:
    """y = act_n(W_n ... act_1(x W_1 + b_1) ... + b_n).

    `params` alternates weight and bias blocks; weights are stored (fan_in,
    fan_out) and applied on the right, so `x` rows are samples.
    """
    if len(params) != 2 * len(activations):
        raise ShapeError(
            f"mlp_forward: {len(params)} param blocks do not pair with {len(activations)} layers"
        )
    y = x
    for i, act in enumerate(activations):
        w, b = params[2 * i], params[2 * i + 1]
        if y.data.shape[-1] != w.tensor.data.shape[0]:
            raise ShapeError(
                f"mlp_forward: layer {i} expects width {w.tensor.data.shape[0]}, got {y.data.shape[-1]}"
            )
        y = add(matmul(y, w.tensor), b.tensor)
        if act not in _ACTIVATIONS:
            raise ArgumentError(f"unknown activation {act!r}")
        y = _ACTIVATIONS[act](y)
    return y


def init_linear(name: str, fan_in: int, fan_out: int, rng: np.random.Generator) -> tuple[ParamBlock, ParamBlock]:
    """Weight uniform in [-sqrt(1/fan_in), sqrt(1/fan_in)], bias zero."""
    bound = math.sqrt(1.0 / fan_in)
    w = ParamBlock(f"{name}.w", Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out))))
    b = ParamBlock(f"{name}.b", Tensor(np.zeros(fan_out)))
    return w, b


def init_weight(name: str, fan_in: int, fan_out: int, rng: np.random.Generator) -> ParamBlock:
    """Bias-free linear map (attention query/key/value style)."""
    bound = math.sqrt(1.0 / fan_in)
    return ParamBlock(name, Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out))))


class Mlp:
    """A named stack of linear layers with per-layer activations."""

    def __init__(self, name: str, widths: Sequence[int], activations: Sequence[str], rng: np.random.Generator):
        if len(widths) < 2 or len(activations) != len(widths) - 1:
            raise ShapeError(f"Mlp {name}: widths {widths} do not pair with activations {activations}")
        self.name = name
        self.activations = list(activations)
        self.params: list[ParamBlock] = []
        for i in range(len(widths) - 1):
            w, b = init_linear(f"{name}.{i}", widths[i], widths[i + 1], rng)
            self.params.extend([w, b])

    def apply(self, x: Tensor) -> Tensor:
        return mlp_forward(self.params, self.activations, x)

    def blocks(self) -> list[ParamBlock]:
        return list(self.params)


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"LRLCKPT1"


def save_checkpoint(path, blocks: Sequence[ParamBlock]) -> None:
    """Write named tensors: magic, then (name_len, name, rank, dims, data) records.

    All integers are 64-bit little-endian; data is little-endian float64 in
    row-major order.
    """
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        for pb in blocks:
            name = pb.name.encode("utf-8")
            arr = np.ascontiguousarray(pb.tensor.data, dtype="<f8")
            f.write(struct.pack("<Q", len(name)))
            f.write(name)
            f.write(struct.pack("<Q", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
            f.write(arr.tobytes(order="C"))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint back into an ordered name -> array mapping."""
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    pos = len(CHECKPOINT_MAGIC)

    def need(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"{path}: truncated at byte {pos} (need {n} more)")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    while pos < len(blob):
        (name_len,) = struct.unpack("<Q", need(8))
        name = need(name_len).decode("utf-8")
        (rank,) = struct.unpack("<Q", need(8))
        shape = struct.unpack(f"<{rank}q", need(8 * rank)) if rank else ()
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(need(8 * count), dtype="<f8").reshape(shape)
        if name in out:
            raise CheckpointError(f"{path}: duplicate tensor name {name!r}")
        out[name] = data.astype(np.float64)
    return out
