"""Minimal reverse-mode autodiff over dense numpy arrays.

A ``Tensor`` wraps one ndarray plus the closure needed to push gradients
back to its parents. Graphs are built eagerly by the primitive
functions below and torn down after ``backward``; there is no shared
global tape, so independent forward passes can run concurrently.

Double precision is the reference mode (all gradient tests run in
float64); single precision is allowed for training. Every primitive
checks its output for non-finite values while ``finite_checks`` is
enabled (the default); training loops may disable the check for speed.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Iterable, Sequence

import numpy as np

from ..errors import ContractViolation, NumericError

_FINITE_CHECKS = True


def finite_checks_enabled() -> bool:
    return _FINITE_CHECKS


def set_finite_checks(enabled: bool) -> None:
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


@contextmanager
def finite_checks(enabled: bool):
    """Temporarily enable/disable the per-op non-finite output check."""
    global _FINITE_CHECKS
    prev = _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)
    try:
        yield
    finally:
        _FINITE_CHECKS = prev


class Tensor:
    """A dense real tensor participating in reverse-mode differentiation.

    ``data`` is a numpy array (row-major), ``grad`` is filled by
    ``backward``. ``_parents``/``_vjp`` record the local backward rule.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _vjp=None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    # -- operator sugar --------------------------------------------------
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __pow__(self, exponent):
        return pow_const(self, exponent)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def _finite_guard(arr: np.ndarray, op: str) -> None:
    if _FINITE_CHECKS and not np.all(np.isfinite(arr)):
        raise NumericError(f"{op} produced non-finite values")


def _make(data: np.ndarray, parents, vjp, op: str) -> Tensor:
    _finite_guard(data, op)
    needs = any(p.requires_grad for p in parents)
    if needs:
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _vjp=vjp)
    return Tensor(data)


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- arithmetic -----------------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = a.data + b.data

    def vjp(g):
        return unbroadcast(g, a.data.shape), unbroadcast(g, b.data.shape)

    return _make(out, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = a.data - b.data

    def vjp(g):
        return unbroadcast(g, a.data.shape), unbroadcast(-g, b.data.shape)

    return _make(out, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = a.data * b.data

    def vjp(g):
        return (
            unbroadcast(g * b.data, a.data.shape),
            unbroadcast(g * a.data, b.data.shape),
        )

    return _make(out, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = a.data / b.data

    def vjp(g):
        return (
            unbroadcast(g / b.data, a.data.shape),
            unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return _make(out, (a, b), vjp, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        return (-g,)

    return _make(-a.data, (a,), vjp, "neg")


def pow_const(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    e = float(exponent)
    out = a.data**e

    def vjp(g):
        return (g * e * a.data ** (e - 1.0),)

    return _make(out, (a,), vjp, "pow")


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting on leading axes."""
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractViolation("matmul requires tensors with ndim >= 2")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ContractViolation(
            f"matmul inner dimensions differ: {a.data.shape} @ {b.data.shape}"
        )
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(ga, a.data.shape), unbroadcast(gb, b.data.shape)

    return _make(out, (a, b), vjp, "matmul")


# -- elementwise nonlinearities -------------------------------------------


def relu(a) -> Tensor:
    a = as_tensor(a)
    keep = a.data > 0
    out = np.where(keep, a.data, 0.0)

    def vjp(g):
        return (np.where(keep, g, 0.0),)

    return _make(out, (a,), vjp, "relu")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _make(out, (a,), vjp, "tanh")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-np.abs(a.data)))
    out = np.where(a.data >= 0, out, 1.0 - out)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), vjp, "sigmoid")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return _make(out, (a,), vjp, "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    out = np.log(a.data)

    def vjp(g):
        return (g / a.data,)

    return _make(out, (a,), vjp, "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def vjp(g):
        return (g * 0.5 / out,)

    return _make(out, (a,), vjp, "sqrt")


def abs_(a) -> Tensor:
    a = as_tensor(a)
    out = np.abs(a.data)

    def vjp(g):
        return (g * np.sign(a.data),)

    return _make(out, (a,), vjp, "abs")


def cos(a) -> Tensor:
    a = as_tensor(a)
    out = np.cos(a.data)

    def vjp(g):
        return (-g * np.sin(a.data),)

    return _make(out, (a,), vjp, "cos")


def sin(a) -> Tensor:
    a = as_tensor(a)
    out = np.sin(a.data)

    def vjp(g):
        return (g * np.cos(a.data),)

    return _make(out, (a,), vjp, "sin")


def softplus(a) -> Tensor:
    """log(1 + exp(x)), evaluated stably for large |x|."""
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)

    def vjp(g):
        s = 1.0 / (1.0 + np.exp(-np.abs(a.data)))
        s = np.where(a.data >= 0, s, 1.0 - s)
        return (g * s,)

    return _make(out, (a,), vjp, "softplus")


# -- reductions and shape ops ----------------------------------------------


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            axes = tuple(ax % a.data.ndim for ax in axes)
            shape = [1 if i in axes else n for i, n in enumerate(a.data.shape)]
            g = g.reshape(shape)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _make(out, (a,), vjp, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.data.shape[ax]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.data.shape),)

    return _make(out, (a,), vjp, "reshape")


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    out = np.swapaxes(a.data, ax1, ax2)

    def vjp(g):
        return (np.swapaxes(g, ax1, ax2),)

    return _make(out, (a,), vjp, "swapaxes")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(parts), vjp, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    out = np.stack([p.data for p in parts], axis=axis)

    def vjp(g):
        slabs = np.split(g, len(parts), axis=axis)
        return tuple(np.squeeze(s, axis=axis) for s in slabs)

    return _make(out, tuple(parts), vjp, "stack")


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    out = a.data[idx]

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out, copy=True), (a,), vjp, "getitem")


def where_const(cond: np.ndarray, a, b) -> Tensor:
    """Select between two tensors with a constant boolean mask.

    Gradient is routed only to the selected branch, so values on the
    non-selected side are fully screened off (used for attention
    masking, where exactness of the screen matters).
    """
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data)

    def vjp(g):
        return (
            unbroadcast(np.where(cond, g, 0.0), a.data.shape),
            unbroadcast(np.where(cond, 0.0, g), b.data.shape),
        )

    return _make(out, (a, b), vjp, "where")


def softmax(a, axis: int = -1) -> Tensor:
    """Row-wise softmax: non-negative, rows sum to 1."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (a,), vjp, "softmax")


# -- backward pass ----------------------------------------------------------


def _toposort(root: Tensor) -> list:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate reverse-mode gradients into every reachable tensor.

    ``loss`` must be a scalar. Gradients add into ``.grad`` fields;
    call ``zero_grads`` on the parameter store between steps.
    """
    if loss.data.size != 1:
        raise ContractViolation(
            f"backward requires a scalar loss, got shape {loss.data.shape}"
        )
    if not loss.requires_grad:
        return
    order = _toposort(loss)
    grads: dict[int, np.ndarray] = {
        id(loss): np.ones_like(loss.data)
    }
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = g.copy()
        else:
            node.grad = node.grad + g
        if node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if not parent.requires_grad or pg is None:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg
        node._vjp = None
        node._parents = ()
