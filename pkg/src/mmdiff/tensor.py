"""Dense tensors with tape-based reverse-mode differentiation.

Every model and loss in the package is built from the primitives here. A
``Tensor`` wraps a numpy array; operations on tensors that require gradients
record a closure on the output, and :func:`backward` replays those closures in
reverse topological order.

Broadcasting is limited to leading batch dimensions: the smaller operand's
shape must be a suffix of the larger one's (a bias of shape ``(d,)`` added to
activations of shape ``(B, N, d)`` is fine, ``(B, 1)`` against ``(B, d)`` is
not).
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPE = np.float64
_GRAD_ENABLED = True


class ShapeError(ValueError):
    pass


def get_default_dtype():
    return _DTYPE


def set_default_dtype(dtype) -> None:
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the precision of newly created tensors."""
    old = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    """Run ops without recording the tape (inference)."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    # basic properties
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], grad_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    live = tuple(p for p in parents if p.requires_grad) if _GRAD_ENABLED else ()
    out.requires_grad = bool(live)
    if live:
        out._parents = live
        out._backward = grad_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    # only ever called on scratch slots during backward(); never mutates g
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _check_broadcast(a: tuple, b: tuple, op: str) -> None:
    if a == b:
        return
    small, big = (a, b) if len(a) <= len(b) else (b, a)
    if len(small) == 0 or big[len(big) - len(small):] == small:
        return
    raise ShapeError(f"{op}: shapes {a} and {b} are not broadcast-compatible (leading batch dims only)")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    return g.reshape(shape)


# elementwise binary ops

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "add")

    def grad_fn(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "sub")

    def grad_fn(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, -_unbroadcast(g, b.shape))

    return _make(a.data - b.data, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        a = as_tensor(a)
        s = float(b)
        return _make(a.data * s, (a,), lambda g: _accum(a, g * s))
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "mul")

    def grad_fn(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), grad_fn)


def div(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return mul(a, 1.0 / float(b))
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "div")
    out = a.data / b.data

    def grad_fn(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), grad_fn)


# elementwise unary ops

def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: _accum(x, g * out))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.log(x.data), (x,), lambda g: _accum(x, g / x.data))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: _accum(x, g * 0.5 / out))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: _accum(x, g * (1.0 - out * out)))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: _accum(x, g * mask))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """GELU, tanh approximation."""
    x = as_tensor(x)
    v = x.data
    v2 = v * v
    inner = _GELU_C * v * (1.0 + 0.044715 * v2)
    th = np.tanh(inner)
    out = 0.5 * v * (1.0 + th)

    def grad_fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v2)
        _accum(x, g * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * dinner))

    return _make(out, (x,), grad_fn)


def square(x) -> Tensor:
    x = as_tensor(x)
    return _make(x.data * x.data, (x,), lambda g: _accum(x, 2.0 * g * x.data))


# reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _accum(x, np.broadcast_to(g, x.shape))

    return _make(np.asarray(out), (x,), grad_fn)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    n = 1
    for a in axes:
        n *= x.shape[a]
    return mul(tsum(x, axis, keepdims), 1.0 / n)


# shape ops

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)
    return _make(out, (x,), lambda g: _accum(x, g.reshape(x.shape)))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if not axes:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return _make(x.data.transpose(axes), (x,), lambda g: _accum(x, g.transpose(inv)))


def swapaxes(x, a: int, b: int) -> Tensor:
    x = as_tensor(x)
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, tuple(axes))


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)
    out = x.data[idx]
    parts = idx if isinstance(idx, tuple) else (idx,)
    advanced = any(isinstance(p, (list, np.ndarray)) for p in parts)

    def grad_fn(g):
        full = np.zeros_like(x.data)
        if advanced:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        _accum(x, full)

    return _make(np.array(out), (x,), grad_fn)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    axis = axis % ts[0].ndim
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def grad_fn(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accum(t, g[tuple(sl)])

    return _make(out, ts, grad_fn)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):]) for t in ts]
    return concat(expanded, axis)


# linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ, {a.shape} and {b.shape}")
    if a.ndim < b.ndim:
        raise ShapeError(f"matmul: left operand must carry the batch dims, got {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def grad_fn(g):
        if a.requires_grad:
            _accum(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                a2 = a.data.reshape(-1, a.shape[-1])
                _accum(b, a2.T @ g.reshape(-1, g.shape[-1]))
            else:
                _accum(b, np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _make(out, (a, b), grad_fn)


# softmax family

def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError(f"softmax over empty axis {axis} of shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        _accum(x, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _make(out, (x,), grad_fn)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError(f"log_softmax over empty axis {axis} of shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def grad_fn(g):
        _accum(x, g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return _make(out, (x,), grad_fn)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data
    d = x.shape[-1]

    def grad_fn(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            _accum(beta, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            _accum(x, rstd * (gx - gx.mean(axis=-1, keepdims=True)
                              - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))

    return _make(out, (x, gamma, beta), grad_fn)


def embedding(table, ids) -> Tensor:
    """Gather rows of ``table`` at integer ``ids`` (any shape)."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding ids out of range [0, {table.shape[0]})")
    out = table.data[ids]

    def grad_fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        _accum(table, full)

    return _make(out, (table,), grad_fn)


# losses

def mse(a, b) -> Tensor:
    """Mean of squared elementwise differences."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def grad_fn(g):
        gd = (2.0 / n) * g * diff
        _accum(a, gd)
        _accum(b, -gd)

    return _make(np.asarray((diff * diff).sum() / n), (a, b), grad_fn)


def cross_entropy(logits, target) -> Tensor:
    """Mean of ``-log softmax(logits)[target]`` over the leading positions.

    ``logits`` is ``(V,)`` with a scalar target, or ``(..., V)`` with an
    integer array of targets shaped like the leading dims.
    """
    logits = as_tensor(logits)
    target = np.asarray(target, dtype=np.int64)
    V = logits.shape[-1]
    if target.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: targets {target.shape} do not match logits {logits.shape}")
    if target.size and (target.min() < 0 or target.max() >= V):
        raise IndexError(f"cross_entropy: target index out of range [0, {V})")
    flat = logits.data.reshape(-1, V)
    tgt = target.reshape(-1)
    n = tgt.size
    if n == 0:
        raise ShapeError("cross_entropy: no targets")
    z = flat - flat.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    nll = lse - z[rows, tgt]

    def grad_fn(g):
        p = np.exp(z - lse[:, None])
        p[rows, tgt] -= 1.0
        _accum(logits, (g / n) * p.reshape(logits.shape))

    return _make(np.asarray(nll.mean()), (logits,), grad_fn)


# graph traversal

def topo_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` through recorded ops, parents first."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
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


def backward(loss: Tensor, inputs: Iterable[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor.

    ``inputs``, when given, are guaranteed a gradient array afterwards: those
    that require grad but are unreachable from ``loss`` get zeros.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.requires_grad:
        order = topo_order(loss)
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node._backward is None:
                if g is not None and node.requires_grad:
                    if node.grad is None:
                        node.grad = np.array(g, dtype=node.data.dtype, copy=True)
                    else:
                        node.grad += g
                continue
            if g is None:
                continue
            # route parent grads through a side table so interior nodes stay clean
            parents = node._parents
            saved = [p.grad for p in parents]
            for p in parents:
                p.grad = None
            node._backward(g)
            for p, old in zip(parents, saved):
                new = p.grad
                p.grad = old
                if new is None:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = new if prev is None else prev + new
    if inputs is not None:
        for t in inputs:
            if t.requires_grad and t.grad is None:
                t.grad = np.zeros_like(t.data)


def numerical_grad(f: Callable[[], float], x: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f()`` with respect to ``x.data``."""
    g = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max-norm relative error, floored to avoid dividing by near-zero grads."""
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-8)
    return float(np.abs(a - b).max(initial=0.0) / denom)
