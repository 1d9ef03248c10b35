"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every op applied to a tensor that requires grad records its parents and a
closure that pushes the output gradient back to them. ``backward`` walks the
recorded graph once in reverse topological order and then releases it; a graph
cannot be walked twice.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Sequence

import numpy as np

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_spent", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self._spent = False
        self.op = ""

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._spent:
            raise RuntimeError("this graph was already differentiated; rebuild it before calling backward again")
        if not self.requires_grad:
            raise RuntimeError("loss does not depend on any tensor that requires grad")
        topo = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        for node in topo:
            if node._parents:
                node._parents = ()
                node._backward = None
                node._spent = True
                node.grad = None if node is not self else node.grad

    # operators -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def _toposort(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def tensor(x, requires_grad: bool = False) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad)


def param(x) -> Tensor:
    return Tensor(np.array(x, dtype=np.float64), requires_grad=True)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _acc(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        g = _unbroadcast(g, t.data.shape)
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _node(data, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        for p in parents:
            if p._spent:
                raise RuntimeError("cannot build on a tensor whose graph was already differentiated")
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.data, b.data, "add")

    def back(g):
        _acc(a, g)
        _acc(b, g)

    return _node(a.data + b.data, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.data, b.data, "sub")

    def back(g):
        _acc(a, g)
        _acc(b, -g)

    return _node(a.data - b.data, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.data, b.data, "mul")

    def back(g):
        if a.requires_grad:
            _acc(a, g * b.data)
        if b.requires_grad:
            _acc(b, g * a.data)

    return _node(a.data * b.data, (a, b), back, "mul")


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.data, b.data, "div")
    out = a.data / b.data

    def back(g):
        if a.requires_grad:
            _acc(a, g / b.data)
        if b.requires_grad:
            _acc(b, -g * out / b.data)

    return _node(out, (a, b), back, "div")


def power(a: Tensor, p: float) -> Tensor:
    a = _lift(a)

    def back(g):
        _acc(a, g * p * a.data ** (p - 1))

    return _node(a.data**p, (a,), back, "pow")


def exp(a: Tensor) -> Tensor:
    a = _lift(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: _acc(a, g * out), "exp")


def log(a: Tensor) -> Tensor:
    a = _lift(a)
    return _node(np.log(a.data), (a,), lambda g: _acc(a, g / a.data), "log")


def sqrt(a: Tensor) -> Tensor:
    a = _lift(a)
    out = np.sqrt(a.data)

    def back(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            _acc(a, np.where(out > 0, g / (2 * np.where(out > 0, out, 1.0)), 0.0))

    return _node(out, (a,), back, "sqrt")


def relu(a: Tensor) -> Tensor:
    a = _lift(a)
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: _acc(a, g * mask), "relu")


def clamp_min(a: Tensor, lo: float) -> Tensor:
    a = _lift(a)
    mask = a.data > lo
    return _node(np.where(mask, a.data, lo), (a,), lambda g: _acc(a, g * mask), "clamp_min")


# --------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands with ndim >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None

    def back(g):
        if a.requires_grad:
            _acc(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            _acc(b, np.swapaxes(a.data, -1, -2) @ g)

    return _node(out, (a, b), back, "matmul")


def _expand(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    a = _lift(a)
    return _node(
        a.data.sum(axis=axis, keepdims=keepdims),
        (a,),
        lambda g: _acc(a, _expand(g, a.shape, axis, keepdims).copy()),
        "sum",
    )


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    a = _lift(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / max(out.size, 1)
    return _node(out, (a,), lambda g: _acc(a, _expand(g, a.shape, axis, keepdims) / count), "mean")


def tmax(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max along one axis; the gradient goes to the first maximal entry."""
    a = _lift(a)
    axis = axis % a.ndim
    idx = np.expand_dims(a.data.argmax(axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis)
    if not keepdims:
        out = np.squeeze(out, axis)

    def back(g):
        full = np.zeros_like(a.data)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(full, idx, gk, axis)
        _acc(a, full)

    return _node(out, (a,), back, "max")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _lift(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        _acc(a, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _node(out, (a,), back, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _lift(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def back(g):
        _acc(a, g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return _node(out, (a,), back, "log_softmax")


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (no affine part)."""
    a = _lift(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    out = xc * inv

    def back(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * out).mean(axis=-1, keepdims=True)
        _acc(a, inv * (g - gm - out * gy))

    return _node(out, (a,), back, "layer_norm")


# --------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape) -> Tensor:
    a = _lift(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} to {tuple(shape)}") from None
    return _node(out, (a,), lambda g: _acc(a, g.reshape(a.shape)), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    a = _lift(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inv = np.argsort(axes)
    return _node(np.transpose(a.data, axes), (a,), lambda g: _acc(a, np.transpose(g, inv)), "transpose")


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def _is_basic(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(p is None or p is Ellipsis or isinstance(p, (int, np.integer, slice)) for p in parts)


def index(a: Tensor, idx) -> Tensor:
    a = _lift(a)
    out = a.data[idx]
    basic = _is_basic(idx)

    def back(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        _acc(a, full)

    return _node(np.array(out, copy=True), (a,), back, "index")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_lift(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat along {axis}: incompatible shapes {[t.shape for t in ts]}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def back(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _acc(t, g[tuple(sl)])

    return _node(out, ts, back, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_lift(t) for t in tensors]
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"stack: incompatible shapes {[t.shape for t in ts]}") from None

    def back(g):
        for k, t in enumerate(ts):
            if t.requires_grad:
                _acc(t, np.take(g, k, axis=axis))

    return _node(out, ts, back, "stack")


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """``out[..., k, :] = a[..., idx[..., k], :]`` with matching leading dims."""
    a = _lift(a)
    idx = np.asarray(idx, dtype=np.int64)
    lead = a.shape[:-2]
    if idx.shape[:-1] != lead:
        raise ShapeError(f"gather_rows: index shape {idx.shape} does not match leading dims of {a.shape}")
    g_count = int(np.prod(lead)) if lead else 1
    flat = a.data.reshape(g_count, a.shape[-2], a.shape[-1])
    fidx = idx.reshape(g_count, idx.shape[-1])
    rows = np.arange(g_count)[:, None]
    out = flat[rows, fidx].reshape(lead + (idx.shape[-1], a.shape[-1]))

    def back(g):
        full = np.zeros_like(flat)
        np.add.at(full, (rows, fidx), g.reshape(g_count, idx.shape[-1], a.shape[-1]))
        _acc(a, full.reshape(a.shape))

    return _node(out, (a,), back, "gather_rows")
