"""Reverse-mode differentiation over numpy arrays.

A ``Tensor`` wraps an ndarray and remembers the tensors it was computed
from together with a closure that pushes its gradient back to them. Only
the operations the transformer needs are provided; several of them are
fused (layer norm, softmax, cross-entropy, embedding sums) so the graph
stays small and the backward passes are numerically stable.
"""
from __future__ import annotations

import math
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np

ArrayLike = Union["Tensor", np.ndarray, float, int]

_GELU_C = math.sqrt(2.0 / math.pi)


class Tensor:
    def __init__(
        self,
        data: np.ndarray,
        _children: Tuple["Tensor", ...] = (),
        _op: str = "",
        requires_grad: bool = False,
    ):
        self.data = np.asarray(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad or any(c.requires_grad for c in _children)
        self._prev = _children if self.requires_grad else ()
        self._op = _op
        self._backward: Callable[[], None] = lambda: None

    # ----------------------------------------------------------------- utils
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    def _lift(self, other: ArrayLike) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def _attach(self, backward: Callable[[], None]) -> "Tensor":
        if self.requires_grad:
            self._backward = backward
        return self

    # ------------------------------------------------------------ arithmetic
    def __add__(self, other: ArrayLike) -> "Tensor":
        other = self._lift(other)
        out = Tensor(self.data + other.data, (self, other), "+")

        def _backward() -> None:
            self._accumulate(_unbroadcast(out.grad, self.shape))
            other._accumulate(_unbroadcast(out.grad, other.shape))

        return out._attach(_backward)

    __radd__ = __add__

    def __mul__(self, other: ArrayLike) -> "Tensor":
        other = self._lift(other)
        out = Tensor(self.data * other.data, (self, other), "*")

        def _backward() -> None:
            self._accumulate(_unbroadcast(out.grad * other.data, self.shape))
            other._accumulate(_unbroadcast(out.grad * self.data, other.shape))

        return out._attach(_backward)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return self * -1.0

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return self + (-self._lift(other))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    # ----------------------------------------------------------------- shape
    def reshape(self, *shape: int) -> "Tensor":
        out = Tensor(self.data.reshape(*shape), (self,), "reshape")

        def _backward() -> None:
            self._accumulate(out.grad.reshape(self.shape))

        return out._attach(_backward)

    def transpose(self, *axes: int) -> "Tensor":
        out = Tensor(self.data.transpose(*axes), (self,), "transpose")
        inverse = np.argsort(axes)

        def _backward() -> None:
            self._accumulate(out.grad.transpose(*inverse))

        return out._attach(_backward)

    def sum(self, axis: Optional[int] = None) -> "Tensor":
        out = Tensor(self.data.sum(axis=axis), (self,), "sum")

        def _backward() -> None:
            g = out.grad if axis is None else np.expand_dims(out.grad, axis)
            self._accumulate(np.broadcast_to(g, self.shape))

        return out._attach(_backward)

    # ----------------------------------------------------------- activations
    def gelu(self) -> "Tensor":
        """GELU, tanh approximation."""
        x = self.data
        inner = _GELU_C * (x + 0.044715 * x ** 3)
        t = np.tanh(inner)
        out = Tensor(0.5 * x * (1.0 + t), (self,), "gelu")

        def _backward() -> None:
            d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
            local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * d_inner
            self._accumulate(out.grad * local)

        return out._attach(_backward)

    # -------------------------------------------------------------- backprop
    def backward(self) -> None:
        """Fill ``grad`` of every tensor this one depends on."""
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if node in visited:
                continue
            visited.add(node)
            stack.append((node, True))
            for child in node._prev:
                if child not in visited:
                    stack.append((child, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            node._backward()


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (undo numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def constant(data: np.ndarray, dtype: Optional[np.dtype] = None) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype))


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


# ------------------------------------------------------------------ ops
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting on leading axes."""
    out = Tensor(np.matmul(a.data, b.data), (a, b), "@")

    def _backward() -> None:
        a._accumulate(_unbroadcast(np.matmul(out.grad, np.swapaxes(b.data, -1, -2)), a.shape))
        b._accumulate(_unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), out.grad), b.shape))

    return out._attach(_backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), "concat")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def _backward() -> None:
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            index = [slice(None)] * out.grad.ndim
            index[axis] = slice(lo, hi)
            t._accumulate(out.grad[tuple(index)])

    return out._attach(_backward)


def take_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """``table[index]`` along the first axis."""
    index = np.asarray(index)
    out = Tensor(table.data[index], (table,), "take")

    def _backward() -> None:
        g = np.zeros_like(table.data)
        np.add.at(g, index, out.grad)
        table._accumulate(g)

    return out._attach(_backward)


def sum_gather(table: Tensor, bins: np.ndarray) -> Tensor:
    """Sum over channels of per-channel embeddings.

    ``table`` is (channels, bins, dim) and ``bins`` is (..., channels) of
    bin indices; the result is (..., dim) with
    ``out[...] = sum_c table[c, bins[..., c]]``.
    """
    bins = np.asarray(bins)
    channels = table.shape[0]
    acc = np.zeros(bins.shape[:-1] + (table.shape[2],), dtype=table.data.dtype)
    for c in range(channels):
        acc += table.data[c][bins[..., c]]
    out = Tensor(acc, (table,), "sum_gather")

    def _backward() -> None:
        g = np.zeros_like(table.data)
        for c in range(channels):
            np.add.at(g[c], bins[..., c], out.grad)
        table._accumulate(g)

    return out._attach(_backward)


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = Tensor(xhat * weight.data + bias.data, (x, weight, bias), "layer_norm")

    def _backward() -> None:
        g = out.grad
        weight._accumulate(_unbroadcast(g * xhat, weight.shape))
        bias._accumulate(_unbroadcast(g, bias.shape))
        gx = g * weight.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        x._accumulate(dx)

    return out._attach(_backward)


def softmax(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis; ``mask`` False entries get probability 0."""
    z = x.data if mask is None else np.where(mask, x.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y, (x,), "softmax")

    def _backward() -> None:
        g = out.grad
        x._accumulate(y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return out._attach(_backward)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, targets: np.ndarray, weights: np.ndarray) -> Tensor:
    """Weighted sum of negative log-likelihoods.

    ``logits`` is (..., K), ``targets`` integer (...) and ``weights``
    (...). Returns the scalar ``sum(weights * -log p[target])``.
    """
    targets = np.asarray(targets)
    weights = np.asarray(weights, dtype=logits.data.dtype)
    logp = log_softmax(logits.data)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    out = Tensor(np.asarray(-(weights * picked).sum(), dtype=logits.data.dtype), (logits,), "cross_entropy")

    def _backward() -> None:
        g = np.exp(logp)
        np.put_along_axis(g, targets[..., None], np.take_along_axis(g, targets[..., None], axis=-1) - 1.0, axis=-1)
        logits._accumulate(g * (weights * out.grad)[..., None])

    return out._attach(_backward)
