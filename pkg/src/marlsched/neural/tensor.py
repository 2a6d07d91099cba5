"""Reverse-mode differentiation over a dynamically recorded tape.

Every op returns a :class:`Tensor` that remembers its parents and a closure
that pushes the upstream gradient back to them.  Only the handful of ops the
schedulers need are provided; there is no graph compiler.
"""
from contextlib import contextmanager

import numpy as np

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Run ops without recording them on the tape."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad")

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        if grad is None:
            if self.value.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.value)
        order = _topological(self)
        self._accumulate(np.asarray(grad, dtype=np.float64))
        for node in reversed(order):
            if node.backward_fn is not None and node.grad is not None:
                node.backward_fn(node.grad)

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

    def __neg__(self):
        return mul(self, -1.0)


def _topological(root):
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _track(*inputs):
    return _GRAD_ENABLED and any(t.requires_grad for t in inputs)


def _make(value, inputs, backward_fn):
    if _track(*inputs):
        return Tensor(value, tuple(t for t in inputs if t.requires_grad), backward_fn, True)
    return Tensor(value)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.value + b.value, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(a.value - b.value, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.value, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.value, b.shape))

    return _make(a.value * b.value, (a, b), bw)


def linear(x, w, b=None):
    """``x @ w.T + b`` for ``x`` of shape (..., in) and ``w`` of shape (out, in)."""
    x, w = as_tensor(x), as_tensor(w)
    out = x.value @ w.value.T
    inputs = (x, w)
    if b is not None:
        b = as_tensor(b)
        out = out + b.value
        inputs = (x, w, b)

    def bw(g):
        if x.requires_grad:
            x._accumulate(g @ w.value)
        if w.requires_grad:
            w._accumulate(g.reshape(-1, g.shape[-1]).T @ x.value.reshape(-1, x.shape[-1]))
        if b is not None and b.requires_grad:
            b._accumulate(g.reshape(-1, g.shape[-1]).sum(axis=0))

    return _make(out, inputs, bw)


def relu(x):
    x = as_tensor(x)
    on = x.value > 0

    def bw(g):
        x._accumulate(g * on)

    return _make(x.value * on, (x,), bw)


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.value)

    def bw(g):
        x._accumulate(g * out)

    return _make(out, (x,), bw)


def log(x):
    x = as_tensor(x)

    def bw(g):
        x._accumulate(g / x.value)

    return _make(np.log(x.value), (x,), bw)


def square(x):
    x = as_tensor(x)

    def bw(g):
        x._accumulate(2.0 * g * x.value)

    return _make(x.value * x.value, (x,), bw)


def tsum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = x.value.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape))

    return _make(out, (x,), bw)


def mean(x, axis=None):
    x = as_tensor(x)
    n = x.value.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis=axis), 1.0 / n)


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape

    def bw(g):
        x._accumulate(g.reshape(old))

    return _make(x.value.reshape(shape), (x,), bw)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.value for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for t, part in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accumulate(part)

    return _make(out, tuple(tensors), bw)


def take(x, idx, axis=-2):
    """Gather slices of ``x`` along ``axis`` (duplicates allowed)."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    ax = axis % x.ndim

    def bw(g):
        full = np.zeros_like(x.value)
        moved = np.moveaxis(full, ax, 0)
        np.add.at(moved, idx, np.moveaxis(g, ax, 0))
        x._accumulate(full)

    return _make(np.take(x.value, idx, axis=ax), (x,), bw)


def pick(x, idx):
    """Row-wise selection ``out[b] = x[b, idx[b]]`` for a 2-D ``x``."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(x.shape[0])

    def bw(g):
        full = np.zeros_like(x.value)
        full[rows, idx] = g
        x._accumulate(full)

    return _make(x.value[rows, idx], (x,), bw)


def spmm(matrix, x):
    """Constant (sparse or dense) ``matrix`` (n, E) applied over axis -2 of ``x`` (..., E, d)."""
    x = as_tensor(x)
    mt = matrix.T
    if x.ndim == 2:
        def bw2(g):
            x._accumulate(np.asarray(mt @ g))

        return _make(np.asarray(matrix @ x.value), (x,), bw2)
    lead = x.shape[:-2]
    e, d = x.shape[-2:]
    flat = np.moveaxis(x.value.reshape(-1, e, d), 1, 0).reshape(e, -1)
    n = matrix.shape[0]
    out = np.asarray(matrix @ flat).reshape(n, -1, d)
    out = np.moveaxis(out, 0, 1).reshape(lead + (n, d))

    def bw(g):
        gf = np.moveaxis(g.reshape(-1, n, d), 1, 0).reshape(n, -1)
        gx = np.asarray(mt @ gf).reshape(e, -1, d)
        x._accumulate(np.moveaxis(gx, 0, 1).reshape(lead + (e, d)))

    return _make(out, (x,), bw)


def _check_mask(mask):
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise NoFeasibleAction("every action is masked")
    return mask


class NoFeasibleAction(ValueError):
    pass


def masked_log_softmax(logits, mask):
    """Log-probabilities over unmasked entries along the last axis.

    Masked positions hold 0 in the output and receive no gradient; callers
    must only read unmasked entries.
    """
    logits = as_tensor(logits)
    mask = _check_mask(mask)
    z = np.where(mask, logits.value, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = np.where(mask, z - lse, 0.0)
    probs = np.where(mask, np.exp(logp), 0.0)

    def bw(g):
        g = np.where(mask, g, 0.0)
        logits._accumulate(g - probs * g.sum(axis=-1, keepdims=True))

    return _make(logp, (logits,), bw)


def masked_softmax(logits, mask):
    """Probabilities with masked entries exactly 0; rows sum to 1."""
    logits = as_tensor(logits)
    mask = _check_mask(mask)
    z = np.where(mask, logits.value, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    probs = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        logits._accumulate(probs * (g - (g * probs).sum(axis=-1, keepdims=True)))

    return _make(probs, (logits,), bw)
