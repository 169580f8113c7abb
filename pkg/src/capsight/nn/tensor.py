"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps a numpy float array (float32 for training runs,
float64 for gradient checks) and records the operations applied to it.
Calling ``backward()`` on a scalar result accumulates gradients into every
upstream tensor created with ``requires_grad=True``.

Only the primitives this package actually needs are implemented; each one
carries a hand-written backward rule, and the whole set is validated
against central finite differences by the gradient-check suite.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

from capsight.errors import DimensionError, NumericsError

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_GRAD_ENABLED = [True]


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, finite differences)."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def grad_enabled() -> bool:
    return _GRAD_ENABLED[-1]


class KinkWatch:
    """Records how close rectifier inputs came to their kink at zero."""

    def __init__(self):
        self.min_abs = math.inf

    def update(self, arr: np.ndarray) -> None:
        if arr.size:
            self.min_abs = min(self.min_abs, float(np.min(np.abs(arr))))


_KINK_WATCHERS: list[KinkWatch] = []


@contextlib.contextmanager
def watch_kinks():
    """Track the smallest |pre-activation| seen by any rectifier in the block.

    Gradient checks use this to resample inputs that land too close to the
    rectifier kink, where finite differences disagree with the subgradient.
    """
    watch = KinkWatch()
    _KINK_WATCHERS.append(watch)
    try:
        yield watch
    finally:
        _KINK_WATCHERS.remove(watch)


class Tensor:
    """A numpy array plus an optional backward edge into the autograd graph."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._parents = ()

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        grad_tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{grad_tag})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- autograd ------------------------------------------------------------

    def _accumulate(self, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        grad = np.asarray(grad, dtype=self.data.dtype)
        if self.grad is None:
            self.grad = grad.copy()
        else:
            self.grad += grad

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        """Run reverse-mode accumulation from this tensor.

        ``grad`` defaults to 1 and is only optional for scalar outputs.
        """
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(
                    "backward() without an explicit gradient requires a scalar output, "
                    f"got shape {self.data.shape}"
                )
            grad = np.ones_like(self.data)
        if not np.all(np.isfinite(self.data)):
            raise NumericsError("backward() called on a non-finite value")

        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator overloads ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -np.asarray(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, like=self), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return pow_const(self, exponent)

    def __getitem__(self, key):
        return getitem(self, key)

    # -- method forms of common primitives --------------------------------------

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    """A learnable tensor. ``name`` is stamped by module registration."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name


# -- graph construction helpers ------------------------------------------------


def _as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))


def _node(data: np.ndarray, parents: tuple, backward) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic ------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    data = a.data + b.data

    def backward(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(g, b.data.shape))

    return _node(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    data = a.data * b.data

    def backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _node(data, (a, b), backward)


def div(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    data = a.data / b.data

    def backward(g):
        a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(data, (a, b), backward)


def pow_const(a: Tensor, exponent: float) -> Tensor:
    a = _as_tensor(a)
    p = float(exponent)
    data = a.data**p

    def backward(g):
        a._accumulate(g * p * a.data ** (p - 1.0))

    return _node(data, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    data = np.sqrt(a.data)

    def backward(g):
        a._accumulate(g / (2.0 * data))

    return _node(data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * data)

    return _node(data, (a,), backward)


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    data = np.log(a.data)

    def backward(g):
        a._accumulate(g / a.data)

    return _node(data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    for watch in _KINK_WATCHERS:
        watch.update(a.data)
    data = np.maximum(a.data, 0)

    def backward(g):
        a._accumulate(g * (a.data > 0))

    return _node(data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    # Split by sign to keep exp() arguments non-positive.
    data = np.where(
        a.data >= 0,
        1.0 / (1.0 + np.exp(-np.abs(a.data))),
        np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))),
    ).astype(a.data.dtype)

    def backward(g):
        a._accumulate(g * data * (1.0 - data))

    return _node(data, (a,), backward)


# -- shape manipulation ----------------------------------------------------------


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a 2-d tensor, got shape {a.data.shape}")
    data = a.data.T

    def backward(g):
        a._accumulate(g.T)

    return _node(data, (a,), backward)


def permute(a: Tensor, axes: tuple) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    data = np.transpose(a.data, axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        a._accumulate(np.transpose(g, inverse))

    return _node(data, (a,), backward)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    a = _as_tensor(a)
    data = a.data.reshape(shape)
    original = a.data.shape

    def backward(g):
        a._accumulate(g.reshape(original))

    return _node(data, (a,), backward)


def getitem(a: Tensor, key) -> Tensor:
    a = _as_tensor(a)
    data = a.data[key]

    def backward(g):
        buf = np.zeros_like(a.data)
        buf[key] = g
        a._accumulate(buf)

    return _node(data, (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(start, stop)
            t._accumulate(g[tuple(index)])

    return _node(data, tuple(tensors), backward)


# -- reductions ------------------------------------------------------------------


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    axes = (axis,) if isinstance(axis, int) else axis

    def backward(g):
        if axes is None:
            a._accumulate(np.broadcast_to(g, a.data.shape))
            return
        if not keepdims:
            for ax in sorted(ax % a.data.ndim for ax in axes):
                g = np.expand_dims(g, ax)
        a._accumulate(np.broadcast_to(g, a.data.shape))

    return _node(data, (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.data.shape[ax] for ax in axes]))
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -- linear algebra ----------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    if b.data.ndim != 2:
        raise DimensionError(f"matmul expects a 2-d right operand, got shape {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul: inner dimensions disagree, {a.data.shape} @ {b.data.shape}"
        )
    data = a.data @ b.data
    in_dim, out_dim = b.data.shape

    def backward(g):
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.reshape(-1, in_dim).T @ g.reshape(-1, out_dim))

    return _node(data, (a, b), backward)


# -- softmax family ----------------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        a._accumulate(data * (g - inner))

    return _node(data, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse

    def backward(g):
        probs = np.exp(data)
        a._accumulate(g - probs * g.sum(axis=axis, keepdims=True))

    return _node(data, (a,), backward)


# -- indexing for embeddings and losses ------------------------------------------------


def gather_rows(table: Tensor, indices) -> Tensor:
    """Row lookup ``table[indices]`` with scatter-add backward (embeddings)."""
    table = _as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    data = table.data[idx]

    def backward(g):
        buf = np.zeros_like(table.data)
        np.add.at(buf, idx, g)
        table._accumulate(buf)

    return _node(data, (table,), backward)


def take_along_rows(a: Tensor, indices) -> Tensor:
    """Pick one column per row: ``out[i] = a[i, indices[i]]``."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if a.data.ndim != 2 or idx.ndim != 1 or idx.shape[0] != a.data.shape[0]:
        raise DimensionError(
            f"take_along_rows: need [n, m] tensor and n indices, got {a.data.shape} and {idx.shape}"
        )
    rows = np.arange(a.data.shape[0])
    data = a.data[rows, idx]

    def backward(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, (rows, idx), g)
        a._accumulate(buf)

    return _node(data, (a,), backward)
