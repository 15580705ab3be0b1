"""Dense tensors with tape-based reverse-mode differentiation.

Operations only record onto a tape when one is active (``with Tape() as tape``)
and at least one input requires a gradient. Outside a tape everything runs as
plain numpy, which is what generation and the frozen teacher use.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64

_ACTIVE: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "frozen", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.frozen = False
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self) -> "Tensor":
        return mul(tsum(self), 1.0 / self.size)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 else shape)


def _not_scalar(t: Tensor):
    raise ValueError(f"tensor of shape {t.shape} is not a scalar")


class Tape:
    """Ordered record of differentiable operations.

    Each record is ``(kind, inputs, output, backward_fn)``; ``backward_fn`` maps
    the output gradient to one gradient (or None) per input.
    """

    def __init__(self):
        self.records: list[tuple[str, tuple[Tensor, ...], Tensor, Callable]] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        self.records.clear()


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(kind: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.records.append((kind, tuple(inputs), out, backward_fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, kind: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _result("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _result("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a: Tensor) -> Tensor:
    return _result("transpose", a.data.T, (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _result("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # split by sign so exp never overflows
    x = a.data
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _result("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return _result("exp", y, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _result("log", np.log(x), (a,), lambda g: (g / x,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _result("clip", np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat of an empty list")
    ax = axis % ts[0].ndim
    ref = ts[0].shape
    for t in ts[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ValueError(f"concat: shapes {[t.shape for t in ts]} differ off axis {axis}")
    splits = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return _result("concat", np.concatenate([t.data for t in ts], axis=ax), ts,
                   lambda g: tuple(np.split(g, splits, axis=ax)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    n = len(ts)
    return _result("stack", np.stack([t.data for t in ts], axis=axis), ts,
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result("sum", np.sum(a.data, axis=axis, keepdims=keepdims), (a,), back)


def getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape

    def back(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, idx, g)
        return (full,)

    return _result("getitem", a.data[idx], (a,), back)


def gather_rows(table: Tensor, ids, frozen_row: int | None = None) -> Tensor:
    """Row lookup ``table[ids]``; the optional ``frozen_row`` never receives gradient."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"id out of range for table with {table.shape[0]} rows")
    shape = table.shape

    def back(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, ids, g)
        if frozen_row is not None:
            full[frozen_row] = 0.0
        return (full,)

    return _result("gather", table.data[ids], (table,), back)


def _softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(logits) -> Tensor:
    a = as_tensor(logits)
    if a.ndim == 0 or a.shape[-1] < 1:
        raise ValueError("softmax needs a last axis of length >= 1")
    y = _softmax_np(a.data)
    return _result("softmax", y, (a,),
                   lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def log_softmax(logits) -> Tensor:
    a = as_tensor(logits)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    return _result("log_softmax", y, (a,),
                   lambda g: (g - np.exp(y) * g.sum(axis=-1, keepdims=True),))


def dropout(a: Tensor, mask: np.ndarray | None, rate: float) -> Tensor:
    """Inverted dropout with an externally drawn keep-mask (so it can be replayed)."""
    if mask is None or rate <= 0.0:
        return a
    return mul(a, mask / (1.0 - rate))


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` of every tensor on ``tape`` that ``loss`` depends on.

    Gradients are added to any existing ``.grad`` so fan-out and repeated calls
    accumulate; call ``zero_grad`` on parameters between steps. The tape is
    cleared afterwards.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.records:
        raise ValueError("backward called on an empty tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    touched: dict[int, Tensor] = {id(loss): loss}
    for _, inputs, out, fn in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        _deposit(out, g)
        for inp, gi in zip(inputs, fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                touched[key] = inp
    # leaves: tensors that were never the output of a record
    for key, g in grads.items():
        _deposit(touched[key], g)
    tape.clear()


def _deposit(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=DTYPE).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g
