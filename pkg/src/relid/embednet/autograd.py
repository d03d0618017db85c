"""A small tape-free reverse-mode autodiff over numpy arrays.

Each ``Tensor`` remembers its parents and a closure that pushes its gradient
into them. ``backward`` walks the graph in reverse topological order. All
values are float64 so that finite-difference checks are meaningful.
"""

from __future__ import annotations

import numpy as np


class Tensor:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad")

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.value

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def backward(self, grad=None):
        backward(self, grad)


def parameter(value) -> Tensor:
    return Tensor(value, requires_grad=True)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _topo(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, grad=None) -> None:
    """Accumulate d(root)/d(leaf) into every reachable leaf's ``grad``."""
    if not root.requires_grad:
        return
    root.grad = np.ones_like(root.value) if grad is None else np.asarray(grad, dtype=np.float64)
    for node in reversed(_topo(root)):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)
            if node.parents:
                # interior gradients are no longer needed
                node.grad = None


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return Tensor(a.value + b.value, (a, b), bw)


def neg(a) -> Tensor:
    return Tensor(-a.value, (a,), lambda g: _accumulate(a, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.value, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.value, b.shape))

    return Tensor(a.value * b.value, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    return Tensor(a.value * c, (a,), lambda g: _accumulate(a, g * c))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.value)
    return Tensor(y, (a,), lambda g: _accumulate(a, g * (1.0 - y * y)))


def sigmoid(a: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return Tensor(y, (a,), lambda g: _accumulate(a, g * y * (1.0 - y)))


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0
    return Tensor(a.value * mask, (a,), lambda g: _accumulate(a, g * mask))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.value)
    return Tensor(y, (a,), lambda g: _accumulate(a, g * y))


def log(a: Tensor) -> Tensor:
    return Tensor(np.log(a.value), (a,), lambda g: _accumulate(a, g / a.value))


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.value)
    return Tensor(y, (a,), lambda g: _accumulate(a, g * 0.5 / y))


def square(a: Tensor) -> Tensor:
    return Tensor(a.value ** 2, (a,), lambda g: _accumulate(a, 2.0 * g * a.value))


def floor_at(a: Tensor, lo: float) -> Tensor:
    """max(a, lo); no gradient flows where the floor is active."""
    mask = a.value > lo
    return Tensor(np.where(mask, a.value, lo), (a,), lambda g: _accumulate(a, g * mask))


# -- linear algebra and reductions --------------------------------------------

def matmul(x, w) -> Tensor:
    """x (..., n) @ w (n, m) -> (..., m)."""
    x, w = as_tensor(x), as_tensor(w)

    def bw(g):
        if x.requires_grad:
            _accumulate(x, g @ w.value.T)
        if w.requires_grad:
            _accumulate(w, x.value.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1]))

    return Tensor(x.value @ w.value, (x, w), bw)


def sum(a: Tensor, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    y = a.value.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return Tensor(y, (a,), bw)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.value.size if axis is None else a.shape[axis]
    return scale(sum(a, axis, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return Tensor(a.value.reshape(shape), (a,), lambda g: _accumulate(a, g.reshape(a.shape)))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return Tensor(a.value.transpose(axes), (a,), lambda g: _accumulate(a, g.transpose(inv)))


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    basic = _is_basic(idx)

    def bw(g):
        if not a.requires_grad:
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.value)
        if basic:
            a.grad[idx] += g
        else:
            np.add.at(a.grad, idx, g)

    return Tensor(a.value[idx], (a,), bw)


def concat(tensors, axis=-1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        for t, part in zip(tensors, np.split(g, sizes, axis=axis)):
            _accumulate(t, part)

    return Tensor(np.concatenate([t.value for t in tensors], axis=axis), tuple(tensors), bw)


def stack(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def bw(g):
        for k, t in enumerate(tensors):
            _accumulate(t, np.take(g, k, axis=axis))

    return Tensor(np.stack([t.value for t in tensors], axis=axis), tuple(tensors), bw)


def unstack(a: Tensor, axis=0) -> list[Tensor]:
    """Split along ``axis``; children write straight into the parent's gradient."""
    n = a.shape[axis]
    out = []
    for k in range(n):
        idx = (slice(None),) * (axis % a.ndim) + (k,)
        out.append(getitem(a, idx))
    return out


# -- softmax family -----------------------------------------------------------

def softmax(a: Tensor, axis=-1) -> Tensor:
    z = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        _accumulate(a, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return Tensor(y, (a,), bw)


def log_softmax(a: Tensor, axis=-1) -> Tensor:
    z = a.value - a.value.max(axis=axis, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g):
        _accumulate(a, g - np.exp(y) * g.sum(axis=axis, keepdims=True))

    return Tensor(y, (a,), bw)


def softmax_xent_value(logits, label) -> tuple[float, np.ndarray]:
    """Cross-entropy of one logit vector against an integer label, and its gradient."""
    logits = np.asarray(logits, dtype=np.float64)
    L = logits.shape[-1]
    if not 0 <= int(label) < L:
        raise ValueError(f"label {label} out of range for {L} classes")
    z = logits - logits.max()
    logp = z - np.log(np.exp(z).sum())
    grad = np.exp(logp)
    grad[int(label)] -= 1.0
    return float(-logp[int(label)]), grad


def softmax_xent(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy over a (B, L) batch of logits."""
    labels = np.asarray(labels, dtype=int).ravel()
    B, L = logits.shape
    if labels.shape != (B,) or np.any(labels < 0) or np.any(labels >= L):
        raise ValueError("invalid labels for softmax_xent")
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(B), labels].mean()

    def bw(g):
        d = np.exp(logp)
        d[np.arange(B), labels] -= 1.0
        _accumulate(logits, g * d / B)

    return Tensor(loss, (logits,), bw)
