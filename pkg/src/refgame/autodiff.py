"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every operation on a :class:`Tensor` that has at least one non-constant
input records a node holding its parents and a vector-Jacobian product.
Node ids come from a global counter, so sorting reachable nodes by id gives
the forward execution order; :func:`backward` walks it once in reverse.

Only leaves (parameters) keep gradients after a backward pass.  Gradients of
intermediate nodes live in a scratch dict for the duration of the pass, which
makes repeated ``backward`` calls accumulate exactly linearly on the leaves.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_FLOOR = 1e-12
NORM_FLOOR = 1e-12

_ids = itertools.count()
_recording = True


class ShapeError(ValueError):
    pass


class Tensor:
    """A float64 array that may take part in gradient computation."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_vjp", "_id")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self._id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


def _raise_not_scalar(t: Tensor):
    raise ShapeError(f"expected a scalar tensor, got shape {t.shape}")


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor(data)
    if _recording and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# elementwise binary ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    """Elementwise division; an exact zero in the denominator is an error."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    if np.any(b.data == 0.0):
        raise ZeroDivisionError(f"div: denominator of shape {b.shape} contains exact zeros")
    out = a.data / b.data

    def vjp(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), vjp)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


# elementwise unary ops


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    """Natural log with the argument clamped to at least ``LOG_FLOOR``."""
    x = as_tensor(x)
    clamped = np.maximum(x.data, LOG_FLOOR)
    active = x.data >= LOG_FLOOR
    return _make(np.log(clamped), (x,), lambda g: (g * active / clamped,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data < 0):
        raise ValueError("sqrt: negative operand")
    out = np.sqrt(x.data)
    if np.any(out == 0.0):
        raise ZeroDivisionError("sqrt: gradient undefined at exact zero")
    return _make(out, (x,), lambda g: (g * 0.5 / out,))


def detach(x) -> Tensor:
    x = as_tensor(x)
    return Tensor(x.data.copy())


# reductions and shape ops


def sum_(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), vjp)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.T, (x,), lambda g: (g.T,))


def getitem(x, index) -> Tensor:
    x = as_tensor(x)

    def vjp(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(x.data[index], (x,), vjp)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = " and ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"concat: incompatible shapes {shapes}") from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, tensors, lambda g: tuple(np.split(g, sizes, axis=axis)))


def gather_rows(table, ids) -> Tensor:
    """Row lookup ``table[ids]``; ids must index existing rows."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"gather_rows: id out of range for table with {table.shape[0]} rows")

    def vjp(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _make(table.data[ids], (table,), vjp)


def pick(x, index) -> Tensor:
    """Select one entry per row of a 2-D tensor: ``x[i, index[i]]``."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if x.ndim != 2 or index.shape != (x.shape[0],):
        raise ShapeError(f"pick: incompatible shapes {x.shape} and {index.shape}")
    rows = np.arange(x.shape[0])

    def vjp(g):
        full = np.zeros_like(x.data)
        full[rows, index] = g
        return (full,)

    return _make(x.data[rows, index], (x,), vjp)


def softmax(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), vjp)


def log_softmax(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    probs = np.exp(out)

    def vjp(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), vjp)


def l2norm(x) -> Tensor:
    """Euclidean norm over the last axis (keepdims).  Zero rows get zero gradient."""
    x = as_tensor(x)
    out = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    safe = np.where(out > 0, out, 1.0)

    def vjp(g):
        return (np.where(out > 0, g * x.data / safe, 0.0),)

    return _make(out, (x,), vjp)


def normalize(x) -> Tensor:
    """Rows scaled to unit norm; rows with norm below ``NORM_FLOOR`` map to zero."""
    x = as_tensor(x)
    norm = l2norm(x)
    live = norm.data > NORM_FLOOR
    inv = np.where(live, 1.0 / np.where(live, norm.data, 1.0), 0.0)
    scale = _make(inv, (norm,), lambda g: (np.where(live, -g * inv * inv, 0.0),))
    return mul(x, scale)


# the graph


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording anything for differentiation."""
    global _recording
    previous, _recording = _recording, False
    try:
        yield
    finally:
        _recording = previous


def _reachable(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    stack = [root]
    nodes = []
    while stack:
        node = stack.pop()
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        nodes.append(node)
        stack.extend(node._parents)
    nodes.sort(key=lambda n: n._id, reverse=True)
    return nodes


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable trainable leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    pending = {id(loss): np.ones_like(loss.data)}
    for node in _reachable(loss):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        else:
            p.grad.fill(0.0)
