"""Reverse-mode automatic differentiation over numpy arrays.

A small recorded-graph engine: each operation builds a node holding its
inputs and a backward closure. Calling ``backward()`` on a scalar walks the
graph in reverse topological order, accumulates gradients additively into
``.grad``, and then frees the graph so a long training run never retains
more than one step's worth of nodes.

Precision is a run-level choice: create parameters and inputs in float64
for checkable numerics or float32 for training speed. Binary operations
refuse to mix the two. All reductions use numpy's fixed evaluation order,
so identical inputs give bit-identical forwards and backwards.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor",
    "NumericError",
    "no_grad",
    "is_grad_enabled",
    "assert_finite",
    "add",
    "mul",
    "matmul",
    "exp",
    "log",
    "sqrt",
    "tanh",
    "gelu",
    "reshape",
    "transpose",
    "tensor_sum",
    "tensor_mean",
    "stack",
    "embedding",
    "softmax",
    "masked_softmax",
    "layer_norm",
    "attention",
    "cross_entropy_from_logits",
    "straight_through",
]


class NumericError(RuntimeError):
    """A non-finite value appeared where the contract requires finite data."""


_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / sampling)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def assert_finite(arr: np.ndarray, context: str = "value") -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite {context} detected")


class Tensor:
    """A dense array plus optional gradient bookkeeping.

    ``data`` is a row-major numpy array (float32 or float64). Gradients
    accumulate additively into ``grad``; shapes always match ``data``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
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

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    def item(self) -> float:
        return float(self.data)

    # -- gradient machinery --------------------------------------------
    def accumulate_grad(self, g: np.ndarray) -> None:
        g = np.asarray(g, dtype=self.data.dtype)
        if self.grad is None:
            self.grad = g.copy() if g.base is not None or g.flags.writeable is False else g
        else:
            self.grad = self.grad + g

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self, grad: np.ndarray | None = None, free_graph: bool = True) -> None:
        """Backpropagate from this node; the graph is freed afterwards."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient needs a scalar")
            grad = np.ones_like(self.data)
        # Iterative topological order; recursion would overflow on deep graphs.
        order: list[Tensor] = []
        seen: set[int] = set()
        stack_: list[tuple[Tensor, bool]] = [(self, False)]
        while stack_:
            node, expanded = stack_.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack_.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack_.append((parent, False))
        self.accumulate_grad(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if free_graph:
                node._parents = ()
                node._backward = None

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -np.asarray(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other ** -1.0)
        return mul(self, 1.0 / np.asarray(other))

    def __pow__(self, exponent):
        return power(self, exponent)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


# ---------------------------------------------------------------------------
# op plumbing
# ---------------------------------------------------------------------------

def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        if x.data.dtype != like.data.dtype:
            raise TypeError(
                f"mixed precision within a pass: {x.data.dtype} vs {like.data.dtype}"
            )
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and linear-algebra primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _coerce(b, a)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    b = _coerce(b, a)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward)


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    out_data = a.data ** exponent

    def backward(g):
        a.accumulate_grad(g * exponent * a.data ** (exponent - 1.0))

    return _make(out_data, (a,), backward)


def matmul(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a.accumulate_grad(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b.accumulate_grad(_unbroadcast(gb, b.data.shape))

    return _make(out_data, (a, b), backward)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        a.accumulate_grad(g * out_data)

    return _make(out_data, (a,), backward)


def log(a: Tensor) -> Tensor:
    out_data = np.log(a.data)

    def backward(g):
        a.accumulate_grad(g / a.data)

    return _make(out_data, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def backward(g):
        a.accumulate_grad(g * 0.5 / out_data)

    return _make(out_data, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def backward(g):
        a.accumulate_grad(g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(a: Tensor) -> Tensor:
    """Smooth gated activation (tanh-form)."""
    x = a.data
    inner = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + t)

    def backward(g):
        sech2 = 1.0 - t * t
        d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * x ** 2)
        a.accumulate_grad(g * (0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner))

    return _make(out_data, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out_data = a.data.reshape(shape)

    def backward(g):
        a.accumulate_grad(g.reshape(a.data.shape))

    return _make(out_data, (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out_data = np.transpose(a.data, axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        a.accumulate_grad(np.transpose(g, inverse))

    return _make(out_data, (a,), backward)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            a.accumulate_grad(np.broadcast_to(g, a.data.shape))
            return
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        a.accumulate_grad(np.broadcast_to(g, a.data.shape))

    return _make(out_data, (a,), backward)


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.data.shape[ax] for ax in axes]))
    return tensor_sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def stack(tensors: list[Tensor], axis: int = 0) -> Tensor:
    first = tensors[0]
    tensors = [_coerce(t, first) for t in tensors]
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        slabs = np.split(g, len(tensors), axis=axis)
        for t, slab in zip(tensors, slabs):
            if t.requires_grad:
                t.accumulate_grad(np.squeeze(slab, axis=axis))

    return _make(out_data, tuple(tensors), backward)


def embedding(table: Tensor, indices: np.ndarray) -> Tensor:
    """Row lookup into ``table`` (K, E); gradient scatter-adds into rows."""
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise IndexError("embedding index out of range")
    out_data = table.data[idx]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.data.shape[1]))
        table.accumulate_grad(gt)

    return _make(out_data, (table,), backward)


# ---------------------------------------------------------------------------
# fused neural primitives
# ---------------------------------------------------------------------------

def masked_softmax(logits: Tensor, allowed: np.ndarray | None) -> Tensor:
    """Softmax over the last axis restricted to ``allowed`` positions.

    ``allowed`` is a boolean array broadcastable against ``logits``;
    ``None`` means every position participates. A row with no allowed
    position cannot be normalised and raises.
    """
    x = logits.data
    assert_finite(x, "softmax input")
    if allowed is None:
        m = x.max(axis=-1, keepdims=True)
        e = np.exp(x - m)
    else:
        allowed = np.broadcast_to(np.asarray(allowed, dtype=bool), x.shape)
        if not allowed.any(axis=-1).all():
            raise ValueError("softmax row with zero allowed positions")
        masked = np.where(allowed, x, -np.inf)
        m = masked.max(axis=-1, keepdims=True)
        e = np.exp(masked - m)  # disallowed rows of exp(-inf) are exactly 0
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * p).sum(axis=-1, keepdims=True)
        logits.accumulate_grad(p * (g - inner))

    return _make(p, (logits,), backward)


def softmax(logits: Tensor) -> Tensor:
    """Numerically stabilised softmax over the last axis."""
    return masked_softmax(logits, None)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then affine."""
    data = x.data
    assert_finite(data, "layer_norm input")
    mu = data.mean(axis=-1, keepdims=True)
    centred = data - mu
    var = (centred * centred).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centred * inv
    out_data = xhat * gain.data + bias.data
    n = data.shape[-1]

    def backward(g):
        if gain.requires_grad:
            gain.accumulate_grad(_unbroadcast(g * xhat, gain.data.shape))
        if bias.requires_grad:
            bias.accumulate_grad(_unbroadcast(g, bias.data.shape))
        if x.requires_grad:
            gx = g * gain.data
            term = gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            x.accumulate_grad(term * inv)

    return _make(out_data, (x, gain, bias), backward)


def _attention_mask(mask, n_q: int, n_k: int) -> np.ndarray | None:
    if isinstance(mask, str):
        if mask == "full":
            return None
        if mask == "causal":
            if n_q != n_k:
                raise ValueError("causal mask needs square attention")
            return np.tril(np.ones((n_q, n_k), dtype=bool))
        raise ValueError(f"unknown attention mask {mask!r}")
    if mask is None:
        return None
    return np.asarray(mask, dtype=bool)


def attention(queries: Tensor, keys: Tensor, values: Tensor, mask="full") -> Tensor:
    """Scaled dot-product attention over the last two axes.

    Shapes: queries (..., Tq, d), keys (..., Tk, d), values (..., Tk, dv).
    ``mask`` is "full", "causal", or a boolean (Tq, Tk) array of allowed
    key positions per query row.
    """
    d = queries.data.shape[-1]
    if keys.data.shape[-1] != d:
        raise ValueError("query/key head dimensions differ")
    if keys.data.shape[-2] != values.data.shape[-2]:
        raise ValueError("key/value lengths differ")
    allowed = _attention_mask(mask, queries.data.shape[-2], keys.data.shape[-2])
    scores = matmul(queries, transpose(keys, tuple(range(keys.ndim - 2)) + (keys.ndim - 1, keys.ndim - 2)))
    scores = scores * (1.0 / math.sqrt(d))
    weights = masked_softmax(scores, allowed)
    return matmul(weights, values)


def cross_entropy_from_logits(logits: Tensor, target) -> Tensor:
    """Negative log-likelihood of ``target`` under softmax(logits).

    ``target`` is an integer index array of shape logits.shape[:-1] or a
    probability array of the full logits shape (rows summing to 1).
    Returns the per-row loss tensor; reduce with sum()/mean() as needed.
    """
    x = logits.data
    assert_finite(x, "cross_entropy input")
    k = x.shape[-1]
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    lse = np.log(e.sum(axis=-1, keepdims=True)) + m
    p = e / e.sum(axis=-1, keepdims=True)

    target = np.asarray(target)
    if np.issubdtype(target.dtype, np.integer):
        if target.shape != x.shape[:-1]:
            raise ValueError("target index shape must equal logits.shape[:-1]")
        if target.size and (target.min() < 0 or target.max() >= k):
            raise IndexError("target index out of range")
        picked = np.take_along_axis(x, target[..., None], axis=-1)
        out_data = (lse - picked)[..., 0]

        def backward(g):
            soft = p.copy()
            np.put_along_axis(
                soft,
                target[..., None],
                np.take_along_axis(soft, target[..., None], axis=-1) - 1.0,
                axis=-1,
            )
            logits.accumulate_grad(soft * g[..., None])

    else:
        q = target.astype(x.dtype)
        if q.shape != x.shape:
            raise ValueError("soft target shape must equal logits shape")
        sums = q.sum(axis=-1)
        if not np.allclose(sums, 1.0, atol=1e-6):
            raise ValueError("soft target rows must sum to 1")
        out_data = (lse[..., 0] - (q * x).sum(axis=-1))

        def backward(g):
            logits.accumulate_grad((p - q) * g[..., None])

    return _make(out_data, (logits,), backward)


def straight_through(z: Tensor, quantized: np.ndarray) -> Tensor:
    """Forward the quantized values; pass gradients through to ``z`` unchanged."""
    quantized = np.asarray(quantized, dtype=z.data.dtype)
    if quantized.shape != z.data.shape:
        raise ValueError("straight_through shapes must match")

    def backward(g):
        z.accumulate_grad(g)

    return _make(quantized.copy(), (z,), backward)
