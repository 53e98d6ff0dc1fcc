"""Tape-free reverse-mode differentiation over numpy arrays.

Every op returns a :class:`Var` that remembers its parents and a closure
mapping the output gradient to parent gradients. ``backward`` walks the graph
in reverse topological order. Graph edges are only recorded when some input
requires a gradient, so inference runs pay almost nothing for the wrapper.
"""

import numpy as np

from . import numerics as nx
from .errors import DimensionError


class Var:
    __slots__ = ("value", "grad", "name", "requires_grad", "_parents", "_backward")

    def __init__(self, value, name=None, requires_grad=False):
        self.value = value
        self.grad = None
        self.name = name
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Var({self.name or 'tmp'}, shape={self.value.shape}, dtype={self.value.dtype})"

    def backward(self, grad=None):
        if grad is None:
            grad = np.ones_like(self.value)
        order = _toposort(self)
        self.grad = grad
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._backward(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g


def _toposort(root):
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def const(value):
    return value if isinstance(value, Var) else Var(np.asarray(value))


def _make(value, name, parents, backward):
    nx.check_finite(value, name)
    out = Var(value, name=name)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b, name="add"):
    a, b = const(a), const(b)
    return _make(
        a.value + b.value,
        name,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def scale(a, c, name="scale"):
    return _make(a.value * c, name, (a,), lambda g: (g * c,))


def total(a, name="total"):
    return _make(np.asarray(a.value.sum()), name, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mul(a, b, name="mul"):
    a, b = const(a), const(b)
    return _make(
        a.value * b.value,
        name,
        (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
    )


def linear(x, w, b=None, name="linear"):
    """``x @ w (+ b)`` for a 2-D weight ``w`` and activations with leading dims."""
    y = nx.matmul(x.value, w.value)
    if b is not None:
        y = y + b.value

    def backward(g):
        gx = g @ w.value.T
        gw = g.reshape(-1, g.shape[-1]).T @ x.value.reshape(-1, x.shape[-1])
        grads = [gx, gw.T]
        if b is not None:
            grads.append(g.reshape(-1, g.shape[-1]).sum(axis=0))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return _make(y, name, parents, backward)


def bmm(a, b, name="bmm"):
    """Batched matmul of two graph values with broadcastable leading dims."""
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"bmm shape mismatch: {a.shape} x {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.value, -1, -2)
        gb = np.swapaxes(a.value, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.value @ b.value, name, (a, b), backward)


def transpose(a, axes, name="transpose"):
    inv = np.argsort(axes)
    return _make(np.transpose(a.value, axes), name, (a,), lambda g: (np.transpose(g, inv),))


def reshape(a, shape, name="reshape"):
    return _make(a.value.reshape(shape), name, (a,), lambda g: (g.reshape(a.shape),))


def take(a, idx, axis, name="take"):
    """Gather entries of ``a`` along ``axis``; repeated indices accumulate gradient."""
    idx = np.asarray(idx)

    def backward(g):
        ga = np.zeros_like(a.value)
        moved = np.moveaxis(ga, axis, 0)
        lead = list(range(idx.ndim))
        g = np.moveaxis(g, [axis + i for i in lead], lead).reshape((-1,) + moved.shape[1:])
        np.add.at(moved, idx.reshape(-1), g)
        return (ga,)

    return _make(np.take(a.value, idx, axis=axis), name, (a,), backward)


def concat(parts, axis, name="concat"):
    parts = [const(p) for p in parts]
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def backward(g):
        return np.split(g, sizes, axis=axis)

    return _make(np.concatenate([p.value for p in parts], axis=axis), name, tuple(parts), backward)


def layer_norm(x, gamma, beta, eps=nx.LN_EPS, name="layer_norm"):
    xhat, inv_std = nx._normalize(x.value, eps)
    y = xhat * gamma.value + beta.value

    def backward(g):
        n = x.shape[-1]
        gxhat = g * gamma.value
        gx = inv_std * (gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True) / n)
        flat = g.reshape(-1, n)
        return gx, (flat * xhat.reshape(-1, n)).sum(axis=0), flat.sum(axis=0)

    return _make(y, name, (x, gamma, beta), backward)


def gelu(x, name="gelu"):
    return _make(nx.gelu(x.value), name, (x,), lambda g: (g * nx.gelu_grad(x.value),))


def rotary(x, positions, name="rotary"):
    return _make(
        nx.rotary_apply(x.value, positions),
        name,
        (x,),
        lambda g: (nx.rotary_apply(g, positions, inverse=True),),
    )


def masked_softmax(x, mask, name="softmax"):
    p = nx.softmax_rows(x.value, mask)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, name, (x,), backward)


def cross_entropy(logits, targets, name="cross_entropy"):
    """Mean next-token loss for 2-D ``logits`` against integer ``targets``."""
    targets = np.asarray(targets)
    loss = nx.cross_entropy(logits.value, targets)

    def backward(g):
        p = np.exp(nx.log_softmax(logits.value))
        p[np.arange(len(targets)), targets] -= 1.0
        return (p * (g / len(targets)),)

    return _make(np.asarray(loss, dtype=logits.dtype), name, (logits,), backward)


def gradient(loss_fn, params):
    """Reverse-mode gradients of ``loss_fn`` with respect to each array in ``params``.

    ``loss_fn`` receives a dict of :class:`Var` leaves keyed like ``params``
    and must return a scalar :class:`Var` (or a plain number for a constant
    loss). Parameters the loss does not reach get zero gradients.
    """
    leaves = {k: Var(v, name=k, requires_grad=True) for k, v in params.items()}
    loss = loss_fn(leaves)
    if isinstance(loss, Var) and loss.requires_grad:
        loss.backward()
    return {k: (v.grad if v.grad is not None else np.zeros_like(v.value)) for k, v in leaves.items()}
