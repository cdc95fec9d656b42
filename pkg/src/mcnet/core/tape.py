"""Reverse-mode automatic differentiation on a linear tape.

Every value is a float64 numpy array.  Operations accept ``Node`` objects or
plain arrays; when none of the operands is a ``Node`` the result is a plain
array and nothing is recorded.  The same model code therefore runs as a pure
numpy forward pass (pass a ``ParameterStore``) or as a differentiable one
(pass a ``Tape``).
"""
from __future__ import annotations

from contextlib import contextmanager

import numpy as np
from scipy.special import expit

from ..errors import ContractError


class Node:
    """A recorded value.  ``parents`` holds ``(node, vjp)`` pairs."""

    __slots__ = ("value", "tape", "parents", "name")
    # make ndarray <op> Node defer to Node's reflected operators
    __array_ufunc__ = None

    def __init__(self, value, tape, parents=(), name=None):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node{label}(shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Tape:
    """Ordered record of operations plus the parameter leaves they read.

    ``tape[name]`` returns a differentiable leaf bound to ``params[name]``;
    the leaf is created once per tape so repeated uses accumulate into one
    gradient.  Names under a frozen prefix come back as plain arrays.
    """

    def __init__(self, params=None):
        self.params = params
        self.nodes: list[Node] = []
        self._leaves: dict[str, Node] = {}
        self._all_leaves: list[Node] = []
        self._frozen: tuple[str, ...] = ()

    def __getitem__(self, name):
        if self.params is None:
            raise ContractError("tape has no parameter store attached")
        value = self.params[name]
        if self.is_frozen(name):
            return value
        leaf = self._leaves.get(name)
        if leaf is None or leaf.value is not value:
            leaf = Node(value, self, name=name)
            self._leaves[name] = leaf
            self._all_leaves.append(leaf)
        return leaf

    def is_frozen(self, name):
        return any(name == p or name.startswith(p + ".") for p in self._frozen)

    @contextmanager
    def frozen(self, *prefixes):
        saved = self._frozen
        self._frozen = saved + tuple(prefixes)
        try:
            yield self
        finally:
            self._frozen = saved

    def watch(self, array, name=None):
        """Differentiable leaf for a non-parameter input (e.g. for saliency)."""
        return Node(np.asarray(array, dtype=np.float64), self, name=name)

    def _record(self, value, parents):
        node = Node(value, self, tuple(parents))
        self.nodes.append(node)
        return node

    def gradients(self, loss):
        """Adjoints of ``loss`` keyed by ``id(node)``, for leaves and watched inputs."""
        if not isinstance(loss, Node) or loss.tape is not self:
            raise ContractError("loss was not produced on this tape")
        if loss.value.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.value.shape}")
        grads = {id(loss): np.ones_like(loss.value)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, vjp in node.parents:
                contrib = vjp(g)
                key = id(parent)
                prev = grads.get(key)
                grads[key] = contrib if prev is None else prev + contrib
        return grads

    def grad_of(self, loss, *inputs):
        grads = self.gradients(loss)
        return [np.asarray(grads.get(id(x), np.zeros_like(x.value)), dtype=np.float64).reshape(x.shape)
                for x in inputs]

    def backward(self, loss):
        """Accumulate d(loss)/d(param) into the store's gradient buffers."""
        grads = self.gradients(loss)
        for leaf in self._all_leaves:
            g = grads.get(id(leaf))
            if g is not None:
                self.params.accumulate_grad(leaf.name, g)


def value_of(x):
    return x.value if isinstance(x, Node) else x


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    return None


def _make(value, *pairs):
    """Wrap ``value`` in a Node if any operand in ``pairs`` is a Node."""
    tape = _tape_of(*(p for p, _ in pairs))
    if tape is None:
        return value
    return tape._record(value, [(p, vjp) for p, vjp in pairs if isinstance(p, Node)])


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _arr(x):
    v = value_of(x)
    return v if isinstance(v, np.ndarray) else np.asarray(v, dtype=np.float64)


# ---------------------------------------------------------------- arithmetic

def add(a, b):
    av, bv = _arr(a), _arr(b)
    return _make(av + bv,
                 (a, lambda g: _unbroadcast(g, av.shape)),
                 (b, lambda g: _unbroadcast(g, bv.shape)))


def sub(a, b):
    av, bv = _arr(a), _arr(b)
    return _make(av - bv,
                 (a, lambda g: _unbroadcast(g, av.shape)),
                 (b, lambda g: _unbroadcast(-g, bv.shape)))


def mul(a, b):
    av, bv = _arr(a), _arr(b)
    return _make(av * bv,
                 (a, lambda g: _unbroadcast(g * bv, av.shape)),
                 (b, lambda g: _unbroadcast(g * av, bv.shape)))


def div(a, b):
    av, bv = _arr(a), _arr(b)
    out = av / bv
    return _make(out,
                 (a, lambda g: _unbroadcast(g / bv, av.shape)),
                 (b, lambda g: _unbroadcast(-g * out / bv, bv.shape)))


def neg(a):
    return _make(-_arr(a), (a, lambda g: -g))


def power(a, exponent):
    """Elementwise ``a ** exponent`` for a constant real exponent."""
    av = _arr(a)
    p = float(exponent)
    return _make(av ** p, (a, lambda g: g * p * av ** (p - 1.0)))


def matmul(a, b):
    av, bv = _arr(a), _arr(b)
    if av.ndim == 0 or bv.ndim == 0:
        raise ContractError("matmul needs at least 1-d operands")
    out = av @ bv

    def grad_a(g):
        if bv.ndim == 1:
            return _unbroadcast(np.multiply.outer(g, bv), av.shape)
        return _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)

    def grad_b(g):
        if bv.ndim == 1:
            return np.tensordot(av, g, axes=(tuple(range(av.ndim - 1)), tuple(range(g.ndim))))
        if av.ndim == 1:
            return _unbroadcast(av[:, None] * g[..., None, :], bv.shape)
        if bv.ndim == 2:
            return av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)

    return _make(out, (a, grad_a), (b, grad_b))


# ---------------------------------------------------------------- elementwise

def tanh(a):
    out = np.tanh(_arr(a))
    return _make(out, (a, lambda g: g * (1.0 - out * out)))


def sigmoid(a):
    out = expit(_arr(a))
    return _make(out, (a, lambda g: g * out * (1.0 - out)))


def exp(a):
    out = np.exp(_arr(a))
    return _make(out, (a, lambda g: g * out))


def log(a):
    av = _arr(a)
    return _make(np.log(av), (a, lambda g: g / av))


def abs_(a):
    av = _arr(a)
    return _make(np.abs(av), (a, lambda g: g * np.sign(av)))


def clip(a, lo, hi):
    av = _arr(a)
    inside = (av >= lo) & (av <= hi)
    return _make(np.clip(av, lo, hi), (a, lambda g: np.where(inside, g, 0.0)))


def where(cond, a, b):
    """Select ``a`` where ``cond`` holds, else ``b``; ``cond`` is a constant mask.

    Unselected entries are never combined arithmetically, so NaNs there do
    not leak into the output or the adjoints.
    """
    cond = np.asarray(cond, dtype=bool)
    av, bv = _arr(a), _arr(b)
    return _make(np.where(cond, av, bv),
                 (a, lambda g: _unbroadcast(np.where(cond, g, 0.0), av.shape)),
                 (b, lambda g: _unbroadcast(np.where(cond, 0.0, g), bv.shape)))


def softmax(a, axis=-1):
    av = _arr(a)
    e = np.exp(av - av.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, (a, lambda g: out * (g - (g * out).sum(axis=axis, keepdims=True))))


# ---------------------------------------------------------------- reductions

def sum_(a, axis=None, keepdims=False):
    av = _arr(a)
    out = av.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, av.shape)

    return _make(out, (a, vjp))


def mean(a, axis=None, keepdims=False):
    av = _arr(a)
    n = av.size if axis is None else np.prod([av.shape[i] for i in np.atleast_1d(axis)])
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / n)


# ---------------------------------------------------------------- structure

def reshape(a, shape):
    av = _arr(a)
    return _make(av.reshape(shape), (a, lambda g: g.reshape(av.shape)))


def transpose(a, axes=None):
    av = _arr(a)
    if axes is None:
        axes = tuple(range(av.ndim))[::-1]
    inverse = np.argsort(axes)
    return _make(av.transpose(axes), (a, lambda g: g.transpose(inverse)))


def swapaxes(a, i, j):
    axes = list(range(_arr(a).ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def getitem(a, index):
    av = _arr(a)

    basic = all(isinstance(i, (int, slice, type(None), type(Ellipsis)))
                for i in (index if isinstance(index, tuple) else (index,)))

    def vjp(g):
        full = np.zeros_like(av)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return full

    return _make(av[index], (a, vjp))


def concat(xs, axis=-1):
    vals = [_arr(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def piece(k):
        return lambda g: np.split(g, bounds, axis=axis)[k]

    return _make(out, *[(x, piece(k)) for k, x in enumerate(xs)])


def stack(xs, axis=0):
    vals = [_arr(x) for x in xs]
    out = np.stack(vals, axis=axis)

    def piece(k):
        return lambda g: np.take(g, k, axis=axis)

    return _make(out, *[(x, piece(k)) for k, x in enumerate(xs)])


def detach(a):
    return value_of(a)


def affine(x, w, b=None):
    out = matmul(x, w)
    return out if b is None else add(out, b)
