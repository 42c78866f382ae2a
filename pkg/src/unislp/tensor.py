"""Dense float64 tensors with reverse-mode automatic differentiation.

Broadcasting is limited to leading-batch expansion: in a binary op the
smaller operand's shape must be a suffix of the larger one's.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by constants")
        return mul(self, 1.0 / np.asarray(other, dtype=DTYPE))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


class Parameter(Tensor):
    """A named leaf tensor. ``trainable`` gates both grad storage and updates."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = "", trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.name = name

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self.requires_grad = bool(flag)
        if not flag:
            self.grad = None

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


make_op = _make


def _check_suffix(a: tuple, b: tuple) -> None:
    if a == b:
        return
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    if long_[len(long_) - len(short):] != short:
        raise ValueError(f"shape mismatch: {a} vs {b} (only leading-batch expansion allowed)")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead > 0 else g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix(a.shape, b.shape)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g, a.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to(g, b.shape))

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix(a.shape, b.shape)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g, a.shape))
        if b.requires_grad:
            b._accumulate(-_reduce_to(g, b.shape))

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix(a.shape, b.shape)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw)


def exp(x: Tensor) -> Tensor:
    out_data = np.exp(x.data)

    def bw(g):
        x._accumulate(g * out_data)

    return _make(out_data, (x,), bw)


def log(x: Tensor) -> Tensor:
    def bw(g):
        x._accumulate(g / x.data)

    return _make(np.log(x.data), (x,), bw)


def tanh(x: Tensor) -> Tensor:
    out_data = np.tanh(x.data)

    def bw(g):
        x._accumulate(g * (1.0 - out_data**2))

    return _make(out_data, (x,), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        x._accumulate(g * mask)

    return _make(np.where(mask, x.data, 0.0), (x,), bw)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    out_data = 0.5 * v * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v**2)
        x._accumulate(g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t**2) * dinner))

    return _make(out_data, (x,), bw)


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape

    def bw(g):
        x._accumulate(g.reshape(src))

    return _make(x.data.reshape(shape), (x,), bw)


def transpose(x: Tensor, axes=()) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))

    def bw(g):
        x._accumulate(g.transpose(inv))

    return _make(x.data.transpose(axes), (x,), bw)


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a1], axes[a2] = axes[a2], axes[a1]
    return transpose(x, axes)


def getitem(x: Tensor, index) -> Tensor:
    src = x.shape

    def bw(g):
        full = np.zeros(src, dtype=DTYPE)
        np.add.at(full, index, g)
        x._accumulate(full)

    return _make(x.data[index], (x,), bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        parts = np.moveaxis(g, axis, 0)
        for t, part in zip(tensors, parts):
            if t.requires_grad:
                t._accumulate(part)

    return _make(out_data, tensors, bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)

    def bw(g):
        parts = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
        for t, part in zip(tensors, parts):
            if t.requires_grad:
                t._accumulate(part)

    return _make(out_data, tensors, bw)


# ---------------------------------------------------------------- reductions


def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    src = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, src))

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), bw)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return sum_(x, axis, keepdims) * (1.0 / n)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[k, n]`` or batched ``a[..., m, k] @ b[..., k, n]`` with equal leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    if a.ndim == 2 and b.ndim > 2:
        raise ValueError(f"matmul batch mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            a._accumulate(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.ndim == 2:
                k, n = b.shape
                b._accumulate(a.data.reshape(-1, k).T @ g.reshape(-1, n))
            else:
                b._accumulate(np.swapaxes(a.data, -1, -2) @ g)

    return _make(a.data @ b.data, (a, b), bw)


# ---------------------------------------------------------------- normalisation


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        x._accumulate(out_data * (g - (g * out_data).sum(axis=axis, keepdims=True)))

    return _make(out_data, (x,), bw)


def _log_softmax_np(v: np.ndarray, axis: int = -1) -> np.ndarray:
    z = v - v.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    out_data = _log_softmax_np(x.data, axis)

    def bw(g):
        x._accumulate(g - np.exp(out_data) * g.sum(axis=axis, keepdims=True))

    return _make(out_data, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis; ``eps`` sits inside the square root."""
    v = x.data
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat
    if gain is not None:
        out_data = out_data * gain.data
    if bias is not None:
        out_data = out_data + bias.data
    parents = tuple(p for p in (x, gain, bias) if p is not None)

    def bw(g):
        if gain is not None and gain.requires_grad:
            gain._accumulate(_reduce_to(g * xhat, gain.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(_reduce_to(g, bias.shape))
        if x.requires_grad:
            gx = g * gain.data if gain is not None else g
            d = v.shape[-1]
            dx = inv / d * (d * gx - gx.sum(axis=-1, keepdims=True)
                            - xhat * (gx * xhat).sum(axis=-1, keepdims=True))
            x._accumulate(dx)

    return _make(out_data, parents, bw)


# ---------------------------------------------------------------- lookups and masks


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)

    def bw(g):
        full = np.zeros(weight.shape, dtype=DTYPE)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[-1]))
        weight._accumulate(full)

    return _make(weight.data[ids], (weight,), bw)


def masked_fill(x: Tensor, mask, value: float) -> Tensor:
    """Replace entries where the (numpy-broadcast, constant) ``mask`` is True."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)

    def bw(g):
        x._accumulate(np.where(mask, 0.0, g))

    return _make(np.where(mask, value, x.data), (x,), bw)


# ---------------------------------------------------------------- losses


class DegenerateBatchError(ValueError):
    pass


def weighted_nll(logits: Tensor, targets, weights) -> Tensor:
    """Unnormalised ``sum_i w_i * -log softmax(logits_i)[t_i]`` over rows of a 2-D logit matrix."""
    targets = np.asarray(targets, dtype=np.int64)
    weights = np.asarray(weights, dtype=DTYPE)
    n, v = logits.shape
    if targets.shape != (n,) or weights.shape != (n,):
        raise ValueError("targets and weights must have one entry per row")
    if np.any(targets[weights != 0] < 0) or np.any(targets[weights != 0] >= v):
        raise ValueError("target index out of range")
    if np.any(weights < 0):
        raise ValueError("weights must be nonnegative")
    safe = np.where(weights != 0, targets, 0)
    logp = _log_softmax_np(logits.data)
    rows = np.arange(n)
    # zero-weight rows are skipped so padding logits cannot inject inf * 0
    picked = np.where(weights != 0, logp[rows, safe], 0.0)
    value = -np.sum(weights * picked)

    def bw(g):
        grad = np.exp(logp)
        grad[rows, safe] -= 1.0
        logits._accumulate(g * grad * weights[:, None])

    return _make(np.asarray(value), (logits,), bw)


def cross_entropy_rows(logits: Tensor, targets, weights=None) -> Tensor:
    """Weighted mean token NLL; a weight of 0 excludes the row."""
    n = logits.shape[0]
    weights = np.ones(n) if weights is None else np.asarray(weights, dtype=DTYPE)
    mass = float(weights.sum())
    if mass <= 0:
        raise DegenerateBatchError("cross entropy over zero effective weight")
    return weighted_nll(logits, targets, weights) * (1.0 / mass)


# ---------------------------------------------------------------- backward


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` for every reachable leaf with requires_grad."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_ = [(loss, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))

    if loss._backward is None:
        loss._accumulate(np.ones_like(loss.data))
        return
    loss.grad = np.ones_like(loss.data)
    # reverse topological order: every contribution lands before a node fires
    for node in reversed(order):
        if node._backward is None:
            continue
        g, node.grad = node.grad, None
        if g is not None:
            node._backward(g)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------- gradient checking


def numerical_grad(f: Callable[[], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. array ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=DTYPE)
    n = np.asarray(numeric, dtype=DTYPE)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))
