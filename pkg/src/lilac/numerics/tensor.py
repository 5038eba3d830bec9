"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation records its parents and a closure that maps the
output gradient to parent gradients.  ``Tensor.backward`` walks the recorded
graph in reverse topological order, visiting each node once.

Broadcasting is limited to leading batch dimensions: an operand may be combined
with another whose shape is a suffix of its own (e.g. a bias ``(D,)`` added to
activations ``(B, L, D)``).  Anything else raises ``ShapeMismatch``.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeMismatch(ValueError):
    pass


class IndexOutOfRange(IndexError):
    pass


class NonFiniteValue(ArithmeticError):
    pass


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) \
            or data.dtype != np.float64 else data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
        self.name = name

    # -- basic properties -------------------------------------------------
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
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeMismatch("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ---------------------------------------------------
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
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / float(other))

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
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, parents before children (iterative DFS)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data)
    parents = tuple(parents)
    if _GRAD_ENABLED and any(_needs_grad(p) for p in parents):
        out._parents = parents
        out._backward = backward
        out.op = op
    return out


# -- broadcasting helpers -----------------------------------------------------
def _check_suffix(a: tuple[int, ...], b: tuple[int, ...]) -> None:
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    if long_[len(long_) - len(short):] != short:
        raise ShapeMismatch(f"shapes {a} and {b} differ beyond leading batch dims")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead > 0 else g


# -- elementwise --------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim and b.ndim:
        _check_suffix(a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim and b.ndim:
        _check_suffix(a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), -_unbroadcast(g, sb)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim and b.ndim:
        _check_suffix(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)

    return _make(ad * bd, (a, b), backward, "mul")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,), "log")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def abs_(a: Tensor) -> Tensor:
    s = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * s,), "abs")


# -- shape ops ----------------------------------------------------------------
def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis
               for i in items)


def getitem(a: Tensor, index) -> Tensor:
    src_shape = a.shape
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros(src_shape)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax):
            raise ShapeMismatch(f"cannot concat shapes {[t.shape for t in tensors]} on axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        shape.insert(axis % (t.ndim + 1), 1)
        expanded.append(reshape(t, tuple(shape)))
    return concat(expanded, axis=axis)


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Repeat ``a`` along new leading batch dims."""
    _check_suffix(a.shape, shape)
    src = a.shape
    return _make(np.broadcast_to(a.data, shape).copy(), (a,),
                 lambda g: (_unbroadcast(g, src),), "broadcast")


# -- reductions ---------------------------------------------------------------
def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    src = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum_(a, axis, keepdims), 1.0 / count)


# -- linear algebra -----------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a (..., m, k) @ b (k, n)`` or batched ``a (..., m, k) @ b (..., k, n)``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch(f"matmul needs >= 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeMismatch(f"matmul batch dims differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(ad @ bd, (a, b), backward, "matmul")


# -- normalisation / probabilities ---------------------------------------------
def _masked_softmax(x: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` (broadcastable bool) keeps True entries."""
    p = _masked_softmax(a.data, mask)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (a,), backward, "softmax")


def log_softmax(a: Tensor) -> Tensor:
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True))
    out = x - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(out, (a,), backward, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    d = xd.shape[-1]

    def backward(g):
        gxhat = g * gd
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
        gbeta = g.reshape(-1, d).sum(axis=0)
        return gx, ggamma, gbeta

    return _make(xhat * gd + beta.data, (x, gamma, beta), backward, "layer_norm")


# -- losses -------------------------------------------------------------------
def softmax_cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean of ``-log softmax(logits)[target]`` over all leading positions.

    ``logits`` has shape ``(..., C)``; ``target`` holds integer classes with
    shape ``logits.shape[:-1]`` (a bare int for a single ``C`` vector).
    """
    x = logits.data
    tgt = np.asarray(target)
    if not np.issubdtype(tgt.dtype, np.integer):
        raise TypeError("target classes must be integers")
    if tgt.shape != x.shape[:-1]:
        raise ShapeMismatch(f"target shape {tgt.shape} vs logits {x.shape}")
    n_classes = x.shape[-1]
    if tgt.size and (tgt.min() < 0 or tgt.max() >= n_classes):
        raise IndexOutOfRange(f"target class outside [0, {n_classes})")
    flat = x.reshape(-1, n_classes)
    t = tgt.reshape(-1)
    m = flat.max(axis=1, keepdims=True)
    e = np.exp(flat - m)
    s = e.sum(axis=1, keepdims=True)
    rows = np.arange(flat.shape[0])
    nll = (np.log(s[:, 0]) + m[:, 0]) - flat[rows, t]
    count = flat.shape[0]

    def backward(g):
        p = e / s
        p[rows, t] -= 1.0
        return ((p * (g / count)).reshape(x.shape),)

    return _make(np.asarray(nll.mean()), (logits,), backward, "cross_entropy")


def l1_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute difference; ``target`` may be a Tensor or an array."""
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"l1_loss shapes differ: {pred.shape} vs {target.shape}")
    return mean(abs_(sub(pred, target)))


# -- attention ----------------------------------------------------------------
def causal_mask(n_q: int, n_k: int | None = None) -> np.ndarray:
    n_k = n_q if n_k is None else n_k
    return np.tril(np.ones((n_q, n_k), dtype=bool))


def attention(q: Tensor, k: Tensor, v: Tensor, causal: bool = False,
              mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention ``softmax(q kᵀ / sqrt(d)) v``.

    Shapes are ``(..., Lq, d)``, ``(..., Lk, d)`` and ``(..., Lk, dv)``.  With
    ``causal`` set, query ``t`` only sees keys ``<= t``.  An explicit boolean
    ``mask`` of shape ``(Lq, Lk)`` is combined with the causal one.
    """
    if k.shape[-2] != v.shape[-2]:
        raise ShapeMismatch(f"keys {k.shape} and values {v.shape} differ in length")
    if q.shape[-1] != k.shape[-1]:
        raise ShapeMismatch(f"queries {q.shape} and keys {k.shape} differ in width")
    n_q, n_k = q.shape[-2], k.shape[-2]
    full = None
    if causal:
        full = causal_mask(n_q, n_k)
    if mask is not None:
        full = mask if full is None else (full & mask)
    scores = mul(matmul(q, swap_last(k)), 1.0 / np.sqrt(q.shape[-1]))
    return matmul(softmax(scores, full), v)
