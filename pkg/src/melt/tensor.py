"""Dense float tensors with reverse-mode automatic differentiation.

Everything downstream (the message encoder, the classification heads, both
training loops) is built from the ops in this module. Data is numpy-backed:
training runs in float32, while float64 inputs are accepted so numerical
checks can run at higher precision. Each op records its inputs and a local
backward rule on the output tensor; ``backward`` replays them once in
reverse topological order.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "ShapeError",
    "tape",
    "backward",
    "stack",
    "gather_rows",
    "gather_bl",
    "gather_positions",
    "segment_mean",
    "scatter_rows",
    "softmax",
    "layer_norm",
    "gelu",
    "sigmoid",
    "dropout",
    "mse_loss",
    "cross_entropy",
]

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return np.ascontiguousarray(arr, dtype=dtype)
    if arr.dtype in _FLOAT_DTYPES:
        return arr
    return arr.astype(np.float32)


class Tensor:
    """A dense n-dimensional float array, optionally carrying a gradient.

    ``requires_grad`` marks leaves (parameters). Tensors produced by ops
    inherit it from their inputs and carry the recorded backward rule.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; scalars are promoted to constants of the same dtype.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_ensure(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        return transpose(self, axes)

    def backward(self) -> None:
        backward(self)


TensorLike = Union[Tensor, np.ndarray, float, int, list]


def _ensure(x: TensorLike, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float32))


def _from_op(data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    if out.requires_grad:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype)
    if t.grad is None:
        t.grad = np.array(g)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to ``shape``, undoing numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def tape(root: Tensor) -> list:
    """Recorded operations reachable from ``root``, inputs before consumers.

    Only gradient-relevant nodes are kept; each appears exactly once, so one
    backward pass visits every node once.
    """
    order: list = []
    seen: set = set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for parent in node._parents:
            stack_.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad = d(loss)/d(tensor)`` for every reachable tensor.

    Gradients of reachable tensors are reset first (each call yields fresh
    derivatives); tensors not feeding into ``loss`` are left untouched.
    Fan-out is handled by summation during the single reverse sweep.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    order = tape(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise / linear algebra
# ---------------------------------------------------------------------------


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a = _ensure(a)
    b = _ensure(b, a.dtype)

    def back(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _from_op(a.data + b.data, (a, b), back)


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a = _ensure(a)
    b = _ensure(b, a.dtype)

    def back(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, -_unbroadcast(g, b.shape))

    return _from_op(a.data - b.data, (a, b), back)


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a = _ensure(a)
    b = _ensure(b, a.dtype)

    def back(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _from_op(a.data * b.data, (a, b), back)


def neg(a: Tensor) -> Tensor:
    def back(g):
        _accum(a, -g)

    return _from_op(-a.data, (a,), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with batching over leading axes.

    Gradients follow dA = dC @ B^T and dB = A^T @ dC, summed over any
    broadcast batch axes.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul operands must be at least 2-d, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def back(g):
        _accum(a, _unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), a.shape))
        _accum(b, _unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.shape))

    return _from_op(np.matmul(a.data, b.data), (a, b), back)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    def back(g):
        _accum(a, g.reshape(a.shape))

    return _from_op(a.data.reshape(shape), (a,), back)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def back(g):
        _accum(a, g.transpose(inverse))

    return _from_op(a.data.transpose(axes), (a,), back)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def back(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape))

    return _from_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), back)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else a.shape[axis]

    def back(g):
        scaled = g / count
        if axis is None:
            _accum(a, np.broadcast_to(scaled, a.shape))
            return
        if not keepdims:
            scaled = np.expand_dims(scaled, axis)
        _accum(a, np.broadcast_to(scaled, a.shape))

    return _from_op(a.data.mean(axis=axis, keepdims=keepdims), (a,), back)


# ---------------------------------------------------------------------------
# indexing / assembly
# ---------------------------------------------------------------------------


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Stack tensors of identical shape along a new axis."""
    if not tensors:
        raise ShapeError("stack requires at least one tensor")
    parents = tuple(tensors)

    def back(g):
        for i, p in enumerate(parents):
            _accum(p, np.take(g, i, axis=axis))

    return _from_op(np.stack([t.data for t in parents], axis=axis), parents, back)


def gather_rows(a: Tensor, indices) -> Tensor:
    """Rows of ``a`` at ``indices``; repeated indices accumulate gradient."""
    idx = np.asarray(indices)

    def back(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        _accum(a, ga)

    return _from_op(a.data[idx], (a,), back)


def gather_bl(a: Tensor, b_idx, l_idx) -> Tensor:
    """Select rows a[b, l] for paired index arrays; output shape (n, ...)."""
    b_idx = np.asarray(b_idx)
    l_idx = np.asarray(l_idx)

    def back(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (b_idx, l_idx), g)
        _accum(a, ga)

    return _from_op(a.data[b_idx, l_idx], (a,), back)


def gather_positions(a: Tensor, positions) -> Tensor:
    """One row per batch element: a[i, positions[i]]."""
    positions = np.asarray(positions)
    return gather_bl(a, np.arange(a.shape[0]), positions)


def segment_mean(a: Tensor, segment_ids, n_segments: int) -> Tensor:
    """Mean of the rows of ``a`` per segment id. Empty segments yield zeros."""
    seg = np.asarray(segment_ids)
    counts = np.bincount(seg, minlength=n_segments).astype(a.data.dtype)
    safe = np.maximum(counts, 1.0)
    sums = np.zeros((n_segments,) + a.shape[1:], dtype=a.data.dtype)
    np.add.at(sums, seg, a.data)

    def back(g):
        _accum(a, g[seg] / safe[seg].reshape((-1,) + (1,) * (a.ndim - 1)))

    return _from_op(sums / safe.reshape((-1,) + (1,) * (a.ndim - 1)), (a,), back)


def scatter_rows(rows: Tensor, b_idx, l_idx, batch: int, length: int) -> Tensor:
    """Place rows[k] at out[b_idx[k], l_idx[k]] in a zero (batch, length, ...) tensor.

    Index pairs must be distinct.
    """
    b_idx = np.asarray(b_idx)
    l_idx = np.asarray(l_idx)
    data = np.zeros((batch, length) + rows.shape[1:], dtype=rows.data.dtype)
    data[b_idx, l_idx] = rows.data

    def back(g):
        _accum(rows, g[b_idx, l_idx])

    return _from_op(data, (rows,), back)


# ---------------------------------------------------------------------------
# nonlinearities and losses
# ---------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along ``axis`` (max-subtracted)."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    out = exp / exp.sum(axis=axis, keepdims=True)

    def back(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        _accum(x, out * (g - inner))

    return _from_op(out, (x,), back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale-shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    d = x.shape[-1]

    def back(g):
        gg = g * gamma.data
        gx = inv * (gg - gg.mean(axis=-1, keepdims=True)
                    - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        _accum(x, gx)
        axes = tuple(range(g.ndim - 1))
        _accum(gamma, (g * xhat).sum(axis=axes))
        _accum(beta, g.sum(axis=axes))

    return _from_op(xhat * gamma.data + beta.data, (x, gamma, beta), back)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-error-linear unit, 0.5 * x * (1 + erf(x / sqrt(2)))."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))

    def back(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        _accum(x, g * (cdf + x.data * pdf))

    return _from_op((x.data * cdf).astype(x.data.dtype, copy=False), (x,), back)


def sigmoid(x: Tensor) -> Tensor:
    pos = x.data >= 0
    out = np.empty_like(x.data)
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    out[~pos] = ex / (1.0 + ex)

    def back(g):
        _accum(x, g * out * (1.0 - out))

    return _from_op(out, (x,), back)


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator],
            train: bool) -> Tensor:
    """Inverted dropout: scale kept units by 1/(1-p) when training, identity in eval."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    mask = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)

    def back(g):
        _accum(x, g * mask)

    return _from_op(x.data * mask, (x,), back)


def mse_loss(pred: Tensor, target: TensorLike) -> Tensor:
    """Mean of squared elementwise differences over all elements."""
    target = _ensure(target, pred.dtype)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss shapes differ: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = pred.size

    def back(g):
        scale = g * (2.0 / n)
        _accum(pred, scale * diff)
        _accum(target, -scale * diff)

    return _from_op(np.asarray((diff * diff).mean(), dtype=pred.dtype), (pred, target), back)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log softmax probability of the true classes.

    Accepts (C,) logits with an int label or (N, C) logits with N labels.
    Computed through log-sum-exp for stability.
    """
    squeeze = logits.ndim == 1
    z = logits.data.reshape(1, -1) if squeeze else logits.data
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, c = z.shape
    if y.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {y.shape}")
    if y.min() < 0 or y.max() >= c:
        raise ValueError(f"label out of range [0, {c}): {y.min() if y.min() < 0 else y.max()}")
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    loss = (lse - z[np.arange(n), y]).mean()

    def back(g):
        p = np.exp(z - m)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), y] -= 1.0
        p *= g / n
        _accum(logits, p.reshape(logits.shape))

    return _from_op(np.asarray(loss, dtype=logits.dtype), (logits,), back)
