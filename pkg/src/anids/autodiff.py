"""Reverse-mode automatic differentiation on a numpy array tape.

Every operation here is polymorphic: called with plain arrays it returns a
plain ``numpy`` result and records nothing, and called with at least one
:class:`Var` it records a node on that variable's :class:`Tape`.  Model and
loss code is therefore written once and used both for training (with
gradients) and for cheap forward-only evaluation (oracles, probes,
finite-difference checks).

>>> tape = Tape()
>>> x = tape.var(3.0)
>>> y = square(x)
>>> float(tape.backward(y)[x])
6.0
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import DomainError


class Tape:
    """Append-only record of operations; insertion order is topological order."""

    def __init__(self):
        self.nodes: list[Var] = []

    def var(self, value) -> "Var":
        """Register a leaf variable (a trainable input)."""
        return Var(np.array(value, dtype=float), self, ())

    def __len__(self):
        return len(self.nodes)

    def backward(self, root: "Var") -> "Gradients":
        if root.tape is not self:
            raise ValueError("root does not belong to this tape")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[root.index] = np.ones_like(root.value)
        for node in reversed(self.nodes[: root.index + 1]):
            g = grads[node.index]
            if g is None:
                continue
            for parent, vjp in node.parents:
                pg = vjp(g)
                k = parent.index
                if grads[k] is None:
                    grads[k] = pg
                else:
                    grads[k] = grads[k] + pg
        return Gradients(grads)


class Gradients:
    def __init__(self, grads: list):
        self._grads = grads

    def __getitem__(self, v: "Var") -> np.ndarray:
        g = self._grads[v.index]
        return np.zeros_like(v.value) if g is None else g


class Var:
    __slots__ = ("value", "tape", "index", "parents")
    __array_ufunc__ = None  # ndarray <op> Var defers to the reflected Var method

    def __init__(self, value: np.ndarray, tape: Tape, parents):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, index={self.index})"

    def __float__(self):
        return float(self.value)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)
    __neg__ = lambda self: neg(self)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def __pow__(self, p):
        if p != 2:
            raise NotImplementedError("only squaring is supported")
        return square(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)


def value(x) -> np.ndarray:
    """Underlying array of a Var, or the argument itself."""
    return x.value if isinstance(x, Var) else x


def is_var(x) -> bool:
    return isinstance(x, Var)


def _record(out: np.ndarray, parents: Sequence[tuple[object, Callable]]):
    live = tuple((p, f) for p, f in parents if isinstance(p, Var))
    if not live:
        return out
    return Var(out, live[0][0].tape, live)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic -------------------------------------------------

def add(a, b):
    av, bv = value(a), value(b)
    sa, sb = np.shape(av), np.shape(bv)
    return _record(av + bv, [(a, lambda g: _unbroadcast(g, sa)), (b, lambda g: _unbroadcast(g, sb))])


def sub(a, b):
    av, bv = value(a), value(b)
    sa, sb = np.shape(av), np.shape(bv)
    return _record(av - bv, [(a, lambda g: _unbroadcast(g, sa)), (b, lambda g: -_unbroadcast(g, sb))])


def mul(a, b):
    av, bv = value(a), value(b)
    sa, sb = np.shape(av), np.shape(bv)
    return _record(
        av * bv,
        [(a, lambda g: _unbroadcast(g * bv, sa)), (b, lambda g: _unbroadcast(g * av, sb))],
    )


def div(a, b):
    av, bv = value(a), value(b)
    if np.any(bv == 0):
        raise DomainError("division by zero")
    sa, sb = np.shape(av), np.shape(bv)
    out = av / bv
    return _record(
        out,
        [(a, lambda g: _unbroadcast(g / bv, sa)), (b, lambda g: _unbroadcast(-g * out / bv, sb))],
    )


def neg(a):
    return _record(-value(a), [(a, lambda g: -g)])


def square(a):
    av = value(a)
    return _record(av * av, [(a, lambda g: 2.0 * av * g)])


def exp(a):
    out = np.exp(value(a))
    return _record(out, [(a, lambda g: g * out)])


def log(a):
    av = value(a)
    if not np.all(av > 0):
        raise DomainError("log of non-positive input")
    return _record(np.log(av), [(a, lambda g: g / av)])


def sqrt(a):
    av = value(a)
    if not np.all(av > 0):
        raise DomainError("sqrt of non-positive input")
    out = np.sqrt(av)
    return _record(out, [(a, lambda g: g / (2.0 * out))])


def tanh(a):
    out = np.tanh(value(a))
    return _record(out, [(a, lambda g: g * (1.0 - out * out))])


def relu(a):
    av = value(a)
    on = av > 0  # subgradient at 0 is 0
    return _record(np.where(on, av, 0.0), [(a, lambda g: g * on)])


def abs_(a):
    av = value(a)
    return _record(np.abs(av), [(a, lambda g: g * np.sign(av))])


# -- reductions and shape ops ----------------------------------------------

def sum_(a, axis=None, keepdims=False):
    av = value(a)
    shape = np.shape(av)
    out = np.sum(av, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return _record(out, [(a, vjp)])


def mean(a, axis=None):
    n = np.size(value(a)) if axis is None else np.shape(value(a))[axis]
    return sum_(a, axis) / float(n)


def reshape(a, shape):
    av = value(a)
    old = np.shape(av)
    return _record(np.reshape(av, shape), [(a, lambda g: np.reshape(g, old))])


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a, idx):
    av = value(a)
    shape = np.shape(av)
    basic = _is_basic(idx)

    def vjp(g):
        out = np.zeros(shape)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return out

    return _record(av[idx], [(a, vjp)])


def concat(parts: Sequence, axis: int = -1):
    vals = [value(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([np.shape(v)[axis] for v in vals])[:-1]

    def make(k):
        return lambda g: np.split(g, bounds, axis=axis)[k]

    return _record(out, [(p, make(k)) for k, p in enumerate(parts)])


def stack(parts: Sequence, axis: int = 0):
    vals = [value(p) for p in parts]
    out = np.stack(vals, axis=axis)

    def make(k):
        return lambda g: np.take(g, k, axis=axis)

    return _record(out, [(p, make(k)) for k, p in enumerate(parts)])


def matmul(a, b):
    av, bv = value(a), value(b)
    return _record(
        av @ bv,
        [(a, lambda g: g @ np.swapaxes(bv, -1, -2)), (b, lambda g: np.swapaxes(av, -1, -2) @ g)],
    )


def segment_sum(a, ids: np.ndarray, n: int):
    """Sum rows of ``a`` into ``n`` buckets given by integer ``ids``."""
    av = value(a)
    out = np.zeros((n,) + np.shape(av)[1:])
    np.add.at(out, ids, av)
    return _record(out, [(a, lambda g: g[ids])])


def dot3(a, b):
    """Row-wise dot product over the last axis."""
    return sum_(mul(a, b), axis=-1)
