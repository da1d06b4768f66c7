"""Dense tensors with tape-based reverse-mode automatic differentiation.

Operations record themselves on the tape that is active in the current
context (``with Tape() as tape: ...``) whenever at least one operand
requires a gradient. ``backward`` then walks the tape in reverse recording
order, which is a valid reverse topological order because an operation can
only be recorded after its inputs exist.

The engine only supports what the grid GNN needs: 2-D affine maps, a few
pointwise functions, axis reductions, row gathers for pooling windows,
constant sparse propagation and a fused cross-entropy.
"""

from __future__ import annotations

import contextvars
import os
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse
from scipy.special import expit

from .errors import IntegrityError, InvalidInputError, ShapeError

DEFAULT_DTYPE = np.float64

_debug = os.environ.get("SARGNN_DEBUG", "") not in ("", "0")
_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "sargnn_active_tape", default=None
)


def set_debug(flag: bool) -> None:
    """Toggle finite-value checking on every operation result."""
    global _debug
    _debug = bool(flag)


def debug_enabled() -> bool:
    return _debug


class Tensor:
    """A dense array that may take part in gradient recording.

    Tensors compare and hash by identity, so they can key gradient dicts.
    """

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            if not np.issubdtype(arr.dtype, np.floating):
                arr = arr.astype(DEFAULT_DTYPE)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"


class _Node:
    __slots__ = ("output", "inputs", "rule")

    def __init__(self, output: Tensor, inputs: tuple[Tensor, ...], rule: Callable):
        self.output = output
        self.inputs = inputs
        self.rule = rule


class Tape:
    """Ordered record of differentiable operations.

    A tape is single-writer: one forward/backward pass owns it. Using it as a
    context manager makes it the recording target for the current thread or
    task.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._tokens: list[contextvars.Token] = []

    def __enter__(self) -> "Tape":
        self._tokens.append(_active_tape.set(self))
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, output: Tensor, inputs: tuple[Tensor, ...], rule: Callable) -> None:
        self.nodes.append(_Node(output, inputs, rule))

    def clear(self) -> None:
        self.nodes.clear()

    def contains(self, tensor: Tensor) -> bool:
        return any(node.output is tensor for node in self.nodes)


def active_tape() -> Tape | None:
    return _active_tape.get()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], rule: Callable) -> Tensor:
    if _debug and not np.all(np.isfinite(data)):
        raise IntegrityError("non-finite value produced by tensor operation")
    out = Tensor(data)
    tape = _active_tape.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, rule)
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: operand shapes differ ({a.shape} vs {b.shape})")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def affine(x, W, b=None) -> Tensor:
    """``x @ W + b`` for ``x[n, d_in]``, ``W[d_in, d_out]``, ``b[d_out]``."""
    x, W = as_tensor(x), as_tensor(W)
    if x.ndim != 2 or W.ndim != 2:
        raise ShapeError(f"affine expects 2-D operands, got {x.shape} and {W.shape}")
    if x.shape[1] != W.shape[0]:
        raise ShapeError(f"affine: inner dimensions disagree ({x.shape} @ {W.shape})")
    out = x.data @ W.data
    inputs: tuple[Tensor, ...] = (x, W)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[1],):
            raise ShapeError(f"affine: bias shape {b.shape} does not match output width {W.shape[1]}")
        out = out + b.data
        inputs = (x, W, b)

    def rule(g):
        grads = [
            g @ W.data.T if x.requires_grad else None,
            x.data.T @ g if W.requires_grad else None,
        ]
        if len(inputs) == 3:
            grads.append(g.sum(axis=0) if inputs[2].requires_grad else None)
        return grads

    return _emit(out, inputs, rule)


def propagate(matrix: sparse.spmatrix, x) -> Tensor:
    """Multiply a constant sparse matrix into the rows of ``x``."""
    x = as_tensor(x)
    if x.ndim != 2 or matrix.shape[1] != x.shape[0]:
        raise ShapeError(f"propagate: matrix {matrix.shape} cannot act on {x.shape}")
    out = np.asarray(matrix @ x.data)
    transposed = matrix.T.tocsr()
    return _emit(out, (x,), lambda g: [np.asarray(transposed @ g)])


# ---------------------------------------------------------------------------
# pointwise
# ---------------------------------------------------------------------------


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _emit(np.where(mask, x.data, 0.0), (x,), lambda g: [g * mask])


def sigmoid(x) -> Tensor:
    """Logistic function, kept strictly inside (0, 1) even where it saturates in floating point."""
    x = as_tensor(x)
    y = expit(x.data)
    if y.dtype.kind == "f":
        fi = np.finfo(y.dtype)
        y = np.clip(y, fi.tiny, 1.0 - fi.epsneg)
    return _emit(y, (x,), lambda g: [g * y * (1.0 - y)])


def hadamard(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "hadamard")
    return _emit(a.data * b.data, (a, b), lambda g: [g * b.data, g * a.data])


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _emit(a.data + b.data, (a, b), lambda g: [g, g])


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _emit(x.data * c, (x,), lambda g: [g * c])


def elementwise(op: str, *args) -> Tensor:
    """Dispatch to one of the pointwise operations by name."""
    table = {"relu": relu, "sigmoid": sigmoid, "hadamard": hadamard, "add": add, "scale": scale}
    if op not in table:
        raise InvalidInputError(f"unknown elementwise op {op!r}")
    return table[op](*args)


def mul_rows(x, gate) -> Tensor:
    """Scale row ``i`` of ``x[n, d]`` by ``gate[i]``."""
    x, gate = as_tensor(x), as_tensor(gate)
    if x.ndim != 2 or gate.shape != (x.shape[0],):
        raise ShapeError(f"mul_rows: gate {gate.shape} does not match rows of {x.shape}")
    col = gate.data[:, None]
    return _emit(x.data * col, (x, gate), lambda g: [g * col, (g * x.data).sum(axis=1)])


def mul_cols(x, gate) -> Tensor:
    """Scale column ``c`` of ``x[n, d]`` by ``gate[c]``."""
    x, gate = as_tensor(x), as_tensor(gate)
    if x.ndim != 2 or gate.shape != (x.shape[1],):
        raise ShapeError(f"mul_cols: gate {gate.shape} does not match columns of {x.shape}")
    row = gate.data[None, :]
    return _emit(x.data * row, (x, gate), lambda g: [g * row, (g * x.data).sum(axis=0)])


# ---------------------------------------------------------------------------
# reductions and reshaping
# ---------------------------------------------------------------------------


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise InvalidInputError(f"axis {axis} out of range for shape {x.shape}")
    axis %= x.ndim
    if x.shape[axis] == 0:
        raise InvalidInputError("cannot reduce over an empty axis")
    return axis


def reduce_mean(x, axis: int) -> Tensor:
    x = as_tensor(x)
    axis = _check_axis(x, axis)
    n = x.shape[axis]
    shape = x.shape
    return _emit(
        x.data.mean(axis=axis),
        (x,),
        lambda g: [np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy()],
    )


def reduce_max(x, axis: int) -> tuple[Tensor, np.ndarray]:
    """Max along ``axis`` plus first-occurrence argmax indices.

    The gradient flows only to the argmax position of each reduced slice.
    """
    x = as_tensor(x)
    axis = _check_axis(x, axis)
    idx = np.argmax(x.data, axis=axis)
    expanded = np.expand_dims(idx, axis)
    out = np.take_along_axis(x.data, expanded, axis=axis).squeeze(axis)

    def rule(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, expanded, np.expand_dims(g, axis), axis=axis)
        return [gx]

    return _emit(out, (x,), rule), idx


def reduce(op: str, x, axis: int):
    """``mean`` returns ``(tensor, None)``; ``max`` returns ``(tensor, argmax)``."""
    if op == "mean":
        return reduce_mean(x, axis), None
    if op == "max":
        return reduce_max(x, axis)
    raise InvalidInputError(f"unknown reduction {op!r}")


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _emit(np.asarray(x.data.sum()), (x,), lambda g: [np.full(shape, float(g))])


def abs_sum(x) -> Tensor:
    """Sum of absolute values; the subgradient at exactly zero is zero."""
    x = as_tensor(x)
    sign = np.sign(x.data)
    return _emit(np.asarray(np.abs(x.data).sum()), (x,), lambda g: [float(g) * sign])


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {old} to {tuple(shape)}") from exc
    return _emit(out, (x,), lambda g: [g.reshape(old)])


def stack_columns(columns: Sequence) -> Tensor:
    """Stack 1-D tensors of equal length as the columns of a matrix."""
    cols = tuple(as_tensor(c) for c in columns)
    if not cols or any(c.ndim != 1 or c.shape != cols[0].shape for c in cols):
        raise ShapeError("stack_columns expects equal-length 1-D tensors")
    out = np.stack([c.data for c in cols], axis=1)
    return _emit(out, cols, lambda g: [g[:, k].copy() for k in range(len(cols))])


def gather_rows(x, index: np.ndarray) -> Tensor:
    """``out[i, j] = x[index[i, j]]``; repeated indices accumulate gradient."""
    x = as_tensor(x)
    index = np.asarray(index)
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise InvalidInputError("gather_rows: index out of range")
    n = x.shape[0]
    flat = index.reshape(-1)

    def rule(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, flat, g.reshape((flat.size,) + x.shape[1:]))
        return [gx]

    if n == 0:
        raise InvalidInputError("gather_rows: empty source")
    return _emit(x.data[index], (x,), rule)


def pick(x, i: int) -> Tensor:
    """Scalar element ``i`` of a 1-D tensor."""
    x = as_tensor(x)
    if x.ndim != 1 or not 0 <= i < x.shape[0]:
        raise InvalidInputError(f"pick: index {i} invalid for shape {x.shape}")

    def rule(g):
        gx = np.zeros_like(x.data)
        gx[i] = float(g)
        return [gx]

    return _emit(np.asarray(x.data[i]), (x,), rule)


def cross_entropy(logits, target: int) -> Tensor:
    """``-log softmax(logits)[target]`` for a 1-D logit vector."""
    logits = as_tensor(logits)
    if logits.ndim != 1:
        raise ShapeError(f"cross_entropy expects 1-D logits, got {logits.shape}")
    if not 0 <= int(target) < logits.shape[0]:
        raise InvalidInputError(f"class index {target} outside [0, {logits.shape[0]})")
    shifted = logits.data - logits.data.max()
    logsumexp = np.log(np.exp(shifted).sum())
    probs = np.exp(shifted - logsumexp)
    loss = logsumexp - shifted[target]

    def rule(g):
        gx = probs.copy()
        gx[target] -= 1.0
        return [float(g) * gx]

    return _emit(np.asarray(loss), (logits,), rule)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def backward(
    tape: Tape,
    loss: Tensor,
    wrt: Iterable[Tensor] | None = None,
    retain: bool = False,
) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``loss`` recorded on ``tape``.

    With ``wrt=None`` the result covers every leaf on the tape that requires a
    gradient (leaves unreachable from the loss get zeros). Passing ``wrt``
    selects specific tensors, intermediates included. Fan-out contributions
    are summed. The tape is cleared afterwards unless ``retain`` is set.
    """
    if loss.size != 1:
        raise InvalidInputError(f"loss must be a scalar, got shape {loss.shape}")
    outputs = {id(node.output) for node in tape.nodes}
    if id(loss) not in outputs:
        raise InvalidInputError("loss was not recorded on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    known: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.output))
        if g is None:
            continue
        contributions = node.rule(g)
        for inp, gi in zip(node.inputs, contributions):
            if gi is None or not inp.requires_grad:
                continue
            known[id(inp)] = inp
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.asarray(gi, dtype=inp.data.dtype).reshape(inp.shape)

    if wrt is None:
        targets = []
        seen = set()
        for node in tape.nodes:
            for inp in node.inputs:
                if inp.requires_grad and id(inp) not in outputs and id(inp) not in seen:
                    seen.add(id(inp))
                    targets.append(inp)
    else:
        targets = list(wrt)

    result = {}
    for t in targets:
        if id(t) in grads:
            result[t] = grads[id(t)]
        elif t.requires_grad and (id(t) in outputs or wrt is None or _is_leaf_on(tape, t)):
            result[t] = np.zeros_like(t.data)
    if not retain:
        tape.clear()
    return result


def _is_leaf_on(tape: Tape, t: Tensor) -> bool:
    return any(inp is t for node in tape.nodes for inp in node.inputs)
