"""Dense tensor arithmetic with reverse-mode automatic differentiation.

Just enough machinery for a small transformer: every operation builds a
node in an implicit graph (the tape); ``backward`` walks it once in
reverse topological order and then frees it.  Values are stored as
row-major float32 buffers; explicit reductions (sums, means, norm
statistics) accumulate in float64 before casting back.  Float64 storage
is also accepted so that oracle code can evaluate the same graph at
higher precision.

Every published operation checks its output for NaN/Inf and raises
:class:`NumericError` instead of propagating silently.  Nothing in this
module draws random numbers.
"""

from __future__ import annotations

import math
import threading
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError, NumericError, ShapeError, UsageError

_GELU_C0 = math.sqrt(2.0 / math.pi)
_GELU_C1 = 0.044715

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that disables graph recording on this thread."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by {op}")


class Tensor:
    """A dense n-dimensional array with an optional gradient buffer.

    ``values`` is always a C-contiguous numpy array of float32 (or
    float64 when constructed that way for oracle evaluation).  ``grad``
    stays ``None`` until ``backward`` reaches this tensor; repeated
    backward passes accumulate into it until ``zero_grad`` is called.
    """

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False, dtype=np.float32):
        arr = np.asarray(values, dtype=dtype, order="C")
        _check_finite(arr, "tensor construction")
        self.values = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] | None = None
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def numel(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise UsageError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy(), dtype=self.values.dtype)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _result(values: np.ndarray, op: str, parents: Sequence[Tensor], backward) -> Tensor:
    """Wrap an op output, recording the graph edge when gradients are on."""
    needs = _grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    arr = np.asarray(values, order="C")
    _check_finite(arr, op)
    out.values = arr
    out.grad = None
    out.requires_grad = needs
    out._parents = tuple(parents) if needs else None
    out._backward = backward if needs else None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _same_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.values.dtype != b.values.dtype:
        raise ShapeError(f"{op}: mixed dtypes {a.values.dtype} and {b.values.dtype}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b, "add")
    try:
        vals = a.values + b.values
    except ValueError as e:
        raise ShapeError(f"add: {e}") from None

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(vals, "add", (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b, "sub")
    try:
        vals = a.values - b.values
    except ValueError as e:
        raise ShapeError(f"sub: {e}") from None

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(vals, "sub", (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (broadcasting) product."""
    _same_dtype(a, b, "mul")
    try:
        vals = a.values * b.values
    except ValueError as e:
        raise ShapeError(f"mul: {e}") from None
    av, bv = a.values, b.values

    def bwd(g):
        return _unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)

    return _result(vals, "mul", (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    f = a.values.dtype.type(s)

    def bwd(g):
        return (g * f,)

    return _result(a.values * f, "scale", (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Standard (optionally batch-stacked) matrix product."""
    _same_dtype(a, b, "matmul")
    if a.values.ndim < 2 or b.values.ndim < 2:
        raise ShapeError("matmul: operands must have at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims {a.shape} x {b.shape}")
    try:
        vals = a.values @ b.values
    except ValueError as e:
        raise ShapeError(f"matmul: {e}") from None
    av, bv = a.values, b.values

    def bwd(g):
        ga = _unbroadcast(g @ bv.swapaxes(-1, -2), a.shape)
        gb = _unbroadcast(av.swapaxes(-1, -2) @ g, b.shape)
        return ga, gb

    return _result(vals, "matmul", (a, b), bwd)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    old = a.shape
    try:
        vals = a.values.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: {e}") from None

    def bwd(g):
        return (g.reshape(old),)

    return _result(vals, "reshape", (a,), bwd)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _result(a.values.transpose(axes), "transpose", (a,), bwd)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        vals = np.broadcast_to(a.values, shape)
    except ValueError as e:
        raise ShapeError(f"broadcast_to: {e}") from None

    def bwd(g):
        return (_unbroadcast(g, a.shape),)

    return _result(vals.copy(), "broadcast_to", (a,), bwd)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    if not (0 <= start and start + length <= a.shape[axis]):
        raise ShapeError(f"narrow: [{start},{start + length}) outside axis of {a.shape[axis]}")
    idx = [slice(None)] * a.values.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    in_shape, dt = a.shape, a.values.dtype

    def bwd(g):
        full = np.zeros(in_shape, dtype=dt)
        full[idx] = g
        return (full,)

    return _result(a.values[idx], "narrow", (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat: no operands")
    for t in tensors[1:]:
        _same_dtype(tensors[0], t, "concat")
    try:
        vals = np.concatenate([t.values for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {e}") from None
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _result(vals, "concat", tuple(tensors), bwd)


def gelu(a: Tensor) -> Tensor:
    """GELU activation (tanh approximation)."""
    x = a.values
    u = _GELU_C0 * (x + _GELU_C1 * x * x * x)
    t = np.tanh(u)
    vals = 0.5 * x * (1.0 + t)

    def bwd(g):
        du = _GELU_C0 * (1.0 + 3.0 * _GELU_C1 * x * x)
        local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
        return (g * local.astype(g.dtype),)

    return _result(vals.astype(x.dtype), "gelu", (a,), bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-stabilized softmax along ``axis``; rows sum to 1."""
    x = a.values
    if not (-x.ndim <= axis < x.ndim):
        raise ShapeError(f"softmax: axis {axis} invalid for shape {a.shape}")
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = np.sum(e, axis=axis, keepdims=True, dtype=np.float64)
    y = (e / s).astype(x.dtype)

    def bwd(g):
        dot = np.sum(g * y, axis=axis, keepdims=True, dtype=np.float64).astype(g.dtype)
        return (y * (g - dot),)

    return _result(y, "softmax", (a,), bwd)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x = a.values
    n = x.shape[-1]
    dt = x.dtype
    mu = np.mean(x, axis=-1, keepdims=True, dtype=np.float64)
    var = np.mean(np.square(x.astype(np.float64) - mu), axis=-1, keepdims=True)
    inv = (1.0 / np.sqrt(var + eps)).astype(dt)
    xhat = (x - mu.astype(dt)) * inv
    vals = xhat * gain.values + bias.values

    def bwd(g):
        gxhat = g * gain.values
        m1 = np.mean(gxhat, axis=-1, keepdims=True, dtype=np.float64).astype(dt)
        m2 = np.mean(gxhat * xhat, axis=-1, keepdims=True, dtype=np.float64).astype(dt)
        gx = inv * (gxhat - m1 - xhat * m2)
        red = tuple(range(g.ndim - 1))
        ggain = np.sum(g * xhat, axis=red, dtype=np.float64).astype(dt)
        gbias = np.sum(g, axis=red, dtype=np.float64).astype(dt)
        return gx, _unbroadcast(ggain, gain.shape), _unbroadcast(gbias, bias.shape)

    return _result(vals, "layer_norm", (a, gain, bias), bwd)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-softmax probability of the true class."""
    x = logits.values
    if x.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be 2-d, got {logits.shape}")
    labels = np.asarray(labels)
    if labels.shape != (x.shape[0],):
        raise ShapeError(f"cross_entropy: {labels.shape} labels for {x.shape} logits")
    ncls = x.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= ncls):
        raise DataError(f"cross_entropy: labels outside [0, {ncls})")
    rows = np.arange(x.shape[0])
    m = np.max(x, axis=1, keepdims=True)
    z = (x - m).astype(np.float64)
    lse = np.log(np.sum(np.exp(z), axis=1))
    loss = np.mean(lse - z[rows, labels])
    dt = x.dtype

    def bwd(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return ((float(g) / x.shape[0]) * p.astype(dt),)

    return _result(np.asarray(loss, dtype=dt), "cross_entropy", (logits,), bwd)


def tsum(a: Tensor) -> Tensor:
    """Sum of all entries (float64 accumulation)."""
    vals = np.sum(a.values, dtype=np.float64).astype(a.values.dtype)
    shape, dt = a.shape, a.values.dtype

    def bwd(g):
        return (np.full(shape, float(g), dtype=dt),)

    return _result(np.asarray(vals), "sum", (a,), bwd)


def tmean(a: Tensor) -> Tensor:
    """Mean of all entries (float64 accumulation)."""
    n = a.values.size
    vals = np.sum(a.values, dtype=np.float64) / n
    shape, dt = a.shape, a.values.dtype

    def bwd(g):
        return (np.full(shape, float(g) / n, dtype=dt),)

    return _result(np.asarray(vals, dtype=dt), "mean", (a,), bwd)


def backward(loss: Tensor) -> None:
    """Reverse-mode pass: fill ``grad`` on every requires_grad leaf.

    Grad buffers accumulate across calls until ``zero_grad``; the graph
    hanging off ``loss`` is freed once the pass completes.
    """
    if loss.values.size != 1:
        raise UsageError(f"backward: loss must be scalar, got shape {loss.shape}")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._parents is not None:
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._parents is None:
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if p._parents is None:
                p.grad = pg.copy() if p.grad is None else p.grad + pg
            else:
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg
        node._parents = None
        node._backward = None


def zero_grads(params: Iterable[Tensor]) -> None:
    """Reset accumulated gradients on the given tensors."""
    for p in params:
        p.grad = None


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], lr: float) -> None:
    """In-place p <- p - lr * g; caller re-applies sparsity masks after."""
    if lr < 0:
        raise ConfigError(f"sgd_step: negative learning rate {lr}")
    if len(params) != len(grads):
        raise ShapeError("sgd_step: params/grads length mismatch")
    for p, g in zip(params, grads):
        if g is None:
            continue
        if g.shape != p.values.shape:
            raise ShapeError(f"sgd_step: grad shape {g.shape} vs param {p.values.shape}")
        p.values -= p.values.dtype.type(lr) * g.astype(p.values.dtype)
        _check_finite(p.values, "sgd_step")
