"""Small reverse-mode autodiff engine over float64 numpy arrays.

Operations are recorded on the innermost active :class:`Tape`. Outside of a
tape every op still computes values but nothing is recorded, which is how
evaluation and frozen snapshots run without gradient bookkeeping::

    x = Tensor([3.0], requires_grad=True)
    with Tape():
        y = sum(mul(x, x))
    backward(y)
    x.grad  # array([6.])

Gradients accumulate into ``Tensor.grad`` across calls to :func:`backward`;
resetting them is the caller's job (see :meth:`Tensor.zero_grad`).
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import DomainError, NumericError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "record_op",
    "backward",
    "grad_check",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "negate",
    "relu",
    "exp",
    "log",
    "sum",
    "mean",
    "logsumexp",
    "add_rowwise",
    "sub_colwise",
    "pick",
    "take_cols",
]

_ACTIVE_TAPES: list["Tape"] = []


class Tensor:
    """Dense float64 array with an optional accumulated gradient."""

    __slots__ = ("values", "grad", "requires_grad", "_tape", "_node_index")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.array(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = (
            np.zeros_like(self.values) if self.requires_grad else None
        )
        self._tape: Tape | None = None
        self._node_index: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.values)

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.values.copy()

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.values!r}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("inputs", "output", "vjp", "name")

    def __init__(self, inputs, output, vjp, name):
        self.inputs = inputs
        self.output = output
        self.vjp = vjp
        self.name = name


class Tape:
    """Ordered record of executed differentiable operations.

    Use as a context manager; tapes nest and the innermost one records.
    ``visits`` counts op backward evaluations over the tape's lifetime.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.visits = 0

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def _append(self, node: _Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record_op(
    values: np.ndarray,
    inputs: Sequence[Tensor],
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]],
    name: str = "op",
) -> Tensor:
    """Wrap ``values`` as the output of an op and record it when needed.

    ``vjp`` maps the output cotangent to one cotangent per input (``None``
    for inputs that do not need one). Recording happens only when some input
    requires a gradient and a tape is active.
    """
    out = Tensor(values)
    if _ACTIVE_TAPES and any(t.requires_grad for t in inputs):
        tape = _ACTIVE_TAPES[-1]
        out.requires_grad = True
        out.grad = np.zeros_like(out.values)
        out._tape = tape
        out._node_index = tape._append(_Node(tuple(inputs), out, vjp, name))
    return out


def backward(scalar: Tensor) -> None:
    """Accumulate d(scalar)/d(t) into ``t.grad`` for every recorded tensor."""
    if scalar.size != 1:
        raise ShapeError(f"backward needs a single-element tensor, got shape {scalar.shape}")
    tape = scalar._tape
    if tape is None or not tape.nodes:
        raise ValueError("tensor was not produced on an active tape")

    cot: dict[int, np.ndarray] = {id(scalar): np.ones_like(scalar.values)}
    touched: dict[int, Tensor] = {id(scalar): scalar}
    for node in reversed(tape.nodes[: scalar._node_index + 1]):
        g = cot.get(id(node.output))
        if g is None:
            continue
        tape.visits += 1
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in cot:
                cot[key] = cot[key] + gi
            else:
                cot[key] = np.asarray(gi, dtype=np.float64).reshape(inp.shape)
                touched[key] = inp
    for key, t in touched.items():
        if t.grad is None:
            t.grad = np.zeros_like(t.values)
        t.grad = t.grad + cot[key]


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Max relative error between the tape gradient and central differences.

    The error for each coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    base = np.array(x.values if isinstance(x, Tensor) else x, dtype=np.float64)

    xt = Tensor(base, requires_grad=True)
    with Tape():
        out = f(xt)
        backward(out)
    analytic = xt.grad.reshape(-1)
    if not np.all(np.isfinite(analytic)):
        raise NumericError("non-finite analytic gradient")

    flat = base.reshape(-1)
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        plus, minus = flat.copy(), flat.copy()
        plus[i] += h
        minus[i] -= h
        fp = f(Tensor(plus.reshape(base.shape))).item()
        fm = f(Tensor(minus.reshape(base.shape))).item()
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite evaluation at coordinate {i}")
        numeric[i] = (fp - fm) / (2 * h)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0


# ----------------------------------------------------------------------------
# Binary ops
# ----------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not agree")
    av, bv = a.values, b.values

    def vjp(g):
        return g @ bv.T, av.T @ g

    return record_op(av @ bv, (a, b), vjp, "matmul")


def _pair(a, b, opname):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} do not agree")
    return a, b


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    # undo scalar broadcast
    if g.shape == t.shape:
        return g
    return np.sum(g).reshape(t.shape)


def add(a, b) -> Tensor:
    a, b = _pair(a, b, "add")

    def vjp(g):
        return _reduce_to(g, a), _reduce_to(g, b)

    return record_op(a.values + b.values, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b, "sub")

    def vjp(g):
        return _reduce_to(g, a), _reduce_to(-g, b)

    return record_op(a.values - b.values, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b, "mul")
    av, bv = a.values, b.values

    def vjp(g):
        return _reduce_to(g * bv, a), _reduce_to(g * av, b)

    return record_op(av * bv, (a, b), vjp, "mul")


# ----------------------------------------------------------------------------
# Unary ops
# ----------------------------------------------------------------------------


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return record_op(a.values * c, (a,), lambda g: (g * c,), "scale")


def negate(a) -> Tensor:
    a = _as_tensor(a)
    return record_op(-a.values, (a,), lambda g: (-g,), "negate")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.values > 0
    return record_op(np.where(mask, a.values, 0.0), (a,), lambda g: (g * mask,), "relu")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.values)
    return record_op(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.values <= 0):
        raise DomainError("log of a non-positive value")
    av = a.values
    return record_op(np.log(av), (a,), lambda g: (g / av,), "log")


# ----------------------------------------------------------------------------
# Reductions
# ----------------------------------------------------------------------------


def _check_axis(t: Tensor, axis):
    if axis is None:
        return None
    nd = t.values.ndim
    if not -nd <= axis < nd:
        raise ShapeError(f"axis {axis} invalid for shape {t.shape}")
    return axis % nd


def sum(t, axis: int | None = None) -> Tensor:  # noqa: A001
    t = _as_tensor(t)
    axis = _check_axis(t, axis)
    shape = t.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return record_op(np.sum(t.values, axis=axis), (t,), vjp, "sum")


def mean(t, axis: int | None = None) -> Tensor:
    t = _as_tensor(t)
    axis = _check_axis(t, axis)
    n = t.size if axis is None else t.shape[axis]
    return scale(sum(t, axis), 1.0 / n)


def logsumexp(t, axis: int | None = None) -> Tensor:
    """log(sum(exp(t))) along ``axis`` with max subtraction."""
    t = _as_tensor(t)
    axis = _check_axis(t, axis)
    v = t.values
    m = np.max(v, axis=axis, keepdims=True)
    shifted = np.exp(v - m)
    s = np.sum(shifted, axis=axis, keepdims=True)
    out_keep = m + np.log(s)
    weights = shifted / s

    def vjp(g):
        g = np.asarray(g)
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (g * weights,)

    out = out_keep.reshape(()) if axis is None else np.squeeze(out_keep, axis=axis)
    return record_op(out, (t,), vjp, "logsumexp")


# ----------------------------------------------------------------------------
# Indexing and row/column broadcasting used by the model and the losses
# ----------------------------------------------------------------------------


def add_rowwise(m, v) -> Tensor:
    """``m[i, j] + v[j]`` for a matrix ``m`` and a vector ``v``."""
    m, v = _as_tensor(m), _as_tensor(v)
    if m.values.ndim != 2 or v.shape != (m.shape[1],):
        raise ShapeError(f"add_rowwise shapes {m.shape} and {v.shape} do not agree")

    def vjp(g):
        return g, g.sum(axis=0)

    return record_op(m.values + v.values, (m, v), vjp, "add_rowwise")


def sub_colwise(m, c) -> Tensor:
    """``m[i, j] - c[i]`` for a matrix ``m`` and a vector ``c``."""
    m, c = _as_tensor(m), _as_tensor(c)
    if m.values.ndim != 2 or c.shape != (m.shape[0],):
        raise ShapeError(f"sub_colwise shapes {m.shape} and {c.shape} do not agree")

    def vjp(g):
        return g, -g.sum(axis=1)

    return record_op(m.values - c.values[:, None], (m, c), vjp, "sub_colwise")


def pick(m, index) -> Tensor:
    """Select ``m[i, index[i]]`` for every row."""
    m = _as_tensor(m)
    index = np.asarray(index, dtype=np.int64)
    if m.values.ndim != 2 or index.shape != (m.shape[0],):
        raise ShapeError(f"pick: index shape {index.shape} invalid for {m.shape}")
    if index.size and (index.min() < 0 or index.max() >= m.shape[1]):
        raise ShapeError("pick: index out of range")
    rows = np.arange(m.shape[0])
    shape = m.shape

    def vjp(g):
        out = np.zeros(shape)
        out[rows, index] = g
        return (out,)

    return record_op(m.values[rows, index], (m,), vjp, "pick")


def take_cols(m, cols) -> Tensor:
    """Column subset ``m[:, cols]``; ``cols`` is an index array or a slice."""
    m = _as_tensor(m)
    if m.values.ndim != 2:
        raise ShapeError(f"take_cols needs a matrix, got shape {m.shape}")
    if isinstance(cols, slice):
        start, stop, step = cols.indices(m.shape[1])
        if cols.stop is not None and cols.stop > m.shape[1]:
            raise ShapeError(f"take_cols: stop {cols.stop} exceeds width {m.shape[1]}")
        cols = np.arange(start, stop, step)
    cols = np.asarray(cols, dtype=np.int64)
    if cols.size and (cols.min() < 0 or cols.max() >= m.shape[1]):
        raise ShapeError("take_cols: column out of range")
    shape = m.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, (slice(None), cols), g)
        return (out,)

    return record_op(m.values[:, cols], (m,), vjp, "take_cols")
