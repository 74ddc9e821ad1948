"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tape` records every primitive applied to a :class:`Node`. Each
primitive accepts plain arrays too; when none of its operands is a node the
result is a plain ``ndarray`` and nothing is recorded, so the same model code
serves inference and training.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tape",
    "Node",
    "value_of",
    "affine",
    "relu",
    "logistic",
    "softplus",
    "exp",
    "expm1",
    "log",
    "power",
    "square",
    "sum",
    "mean",
    "min",
    "where",
    "stack",
    "concat",
    "reshape",
    "custom",
]

Vjp = Callable[[np.ndarray], np.ndarray]


class Node:
    """A recorded value. Supports arithmetic with arrays, scalars and nodes."""

    __slots__ = ("value", "tape", "index", "parents")
    __array_priority__ = 1000

    def __init__(self, value, tape: "Tape", parents: Sequence[tuple["Node", Vjp]]):
        self.value = np.asarray(value, dtype=np.float64)
        self.tape = tape
        self.parents = tuple(parents)
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
        return f"Node(index={self.index}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, negative(other))

    def __rsub__(self, other):
        return add(other, negative(self))

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return negative(self)

    def __getitem__(self, index):
        return getitem(self, index)


class Tape:
    """Records nodes in creation order; creation order is a topological order."""

    def __init__(self):
        self.nodes: list[Node] = []

    def watch(self, value) -> Node:
        """Register a leaf whose gradient is wanted."""
        return Node(np.array(value, dtype=np.float64, copy=True), self, ())

    def backward(self, output: Node, seed=None) -> dict[int, np.ndarray]:
        """Propagate cotangents from ``output``; returns grads keyed by node index."""
        if output.tape is not self:
            raise ValueError("output node was recorded on a different tape")
        if seed is None:
            if output.value.size != 1:
                raise ValueError("a seed is required for non-scalar outputs")
            seed = np.ones_like(output.value)
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != output.value.shape:
            raise ValueError(
                f"seed shape {seed.shape} does not match output shape {output.value.shape}"
            )
        grads: dict[int, np.ndarray] = {output.index: seed}
        for node in reversed(self.nodes[: output.index + 1]):
            g = grads.pop(node.index, None) if node.parents else grads.get(node.index)
            if g is None or not node.parents:
                continue
            for parent, vjp in node.parents:
                contrib = vjp(g)
                if parent.index in grads:
                    grads[parent.index] = grads[parent.index] + contrib
                else:
                    grads[parent.index] = contrib
        return grads

    def gradient(self, output: Node, leaf: Node, seed=None) -> np.ndarray:
        grads = self.backward(output, seed)
        return grads.get(leaf.index, np.zeros_like(leaf.value))


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


def _tape_of(*args) -> Tape | None:
    for a in args:
        if isinstance(a, Node):
            return a.tape
    return None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def custom(value, inputs: Sequence, vjps: Sequence[Vjp]):
    """Record an op with hand-written vector-Jacobian products.

    ``vjps[i]`` maps the output cotangent to the cotangent of ``inputs[i]``.
    Non-node inputs are treated as constants.
    """
    tape = _tape_of(*inputs)
    if tape is None:
        return np.asarray(value, dtype=np.float64)
    parents = [(x, f) for x, f in zip(inputs, vjps) if isinstance(x, Node)]
    return Node(value, tape, parents)


# -- elementwise arithmetic ---------------------------------------------------


def add(a, b):
    av, bv = value_of(a), value_of(b)
    out = av + bv
    return custom(
        out,
        (a, b),
        (lambda g: _unbroadcast(g, av.shape), lambda g: _unbroadcast(g, bv.shape)),
    )


def negative(a):
    return custom(-value_of(a), (a,), (lambda g: -g,))


def multiply(a, b):
    av, bv = value_of(a), value_of(b)
    return custom(
        av * bv,
        (a, b),
        (lambda g: _unbroadcast(g * bv, av.shape), lambda g: _unbroadcast(g * av, bv.shape)),
    )


def divide(a, b):
    av, bv = value_of(a), value_of(b)
    out = av / bv
    return custom(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g / bv, av.shape),
            lambda g: _unbroadcast(-g * out / bv, bv.shape),
        ),
    )


def square(a):
    av = value_of(a)
    return custom(av * av, (a,), (lambda g: 2.0 * g * av,))


def power(a, p):
    """``a ** p`` for a positive base; ``p`` may itself be a node."""
    av, pv = value_of(a), value_of(p)
    out = av**pv
    return custom(
        out,
        (a, p),
        (
            lambda g: _unbroadcast(g * pv * av ** (pv - 1.0), av.shape),
            lambda g: _unbroadcast(g * out * np.log(av), pv.shape),
        ),
    )


def exp(a):
    out = np.exp(value_of(a))
    return custom(out, (a,), (lambda g: g * out,))


def expm1(a):
    av = value_of(a)
    out = np.expm1(av)
    return custom(out, (a,), (lambda g: g * np.exp(av),))


def log(a):
    av = value_of(a)
    return custom(np.log(av), (a,), (lambda g: g / av,))


# -- activations --------------------------------------------------------------


def relu(a):
    av = value_of(a)
    mask = av > 0
    return custom(np.where(mask, av, 0.0), (a,), (lambda g: g * mask,))


def logistic(a):
    av = value_of(a)
    out = np.empty_like(av)
    pos = av >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-av[pos]))
    e = np.exp(av[~pos])
    out[~pos] = e / (1.0 + e)
    return custom(out, (a,), (lambda g: g * out * (1.0 - out),))


def softplus(a):
    av = value_of(a)
    out = np.logaddexp(0.0, av)
    return custom(out, (a,), (lambda g: g * logistic(av),))


# -- linear algebra and reductions --------------------------------------------


def affine(x, w, b):
    """``x @ w + b`` for a batch ``x`` of shape (n, fan_in)."""
    xv, wv, bv = value_of(x), value_of(w), value_of(b)
    out = xv @ wv + bv
    return custom(
        out,
        (x, w, b),
        (lambda g: g @ wv.T, lambda g: xv.T @ g, lambda g: g.sum(axis=0)),
    )


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    av = value_of(a)
    out = av.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, av.shape).copy()

    return custom(out, (a,), (vjp,))


def mean(a, axis=None):
    av = value_of(a)
    count = av.size if axis is None else av.shape[axis]
    return sum(a, axis=axis) * (1.0 / count)


def min(a, axis: int = -1):  # noqa: A001 - mirrors numpy
    """Minimum along ``axis``; ties route the whole cotangent to the lowest index."""
    av = value_of(a)
    arg = np.argmin(av, axis=axis)  # argmin returns the first occurrence
    out = np.take_along_axis(av, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def vjp(g):
        full = np.zeros_like(av)
        np.put_along_axis(full, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return full

    return custom(out, (a,), (vjp,))


def where(mask, a, b):
    mask = np.asarray(mask, dtype=bool)
    av, bv = value_of(a), value_of(b)
    out = np.where(mask, av, bv)
    return custom(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(np.where(mask, g, 0.0), av.shape),
            lambda g: _unbroadcast(np.where(mask, 0.0, g), bv.shape),
        ),
    )


def stack(items: Sequence, axis: int = 0):
    values = [value_of(x) for x in items]
    out = np.stack(values, axis=axis)

    def make(i):
        return lambda g: np.take(g, i, axis=axis)

    return custom(out, items, [make(i) for i in range(len(items))])


def concat(items: Sequence, axis: int = 0):
    values = [value_of(x) for x in items]
    out = np.concatenate(values, axis=axis)
    bounds = np.cumsum([0] + [v.shape[axis] for v in values])

    def make(i):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(bounds[i], bounds[i + 1])
        return lambda g: g[tuple(sl)]

    return custom(out, items, [make(i) for i in range(len(items))])


def reshape(a, shape):
    av = value_of(a)
    return custom(av.reshape(shape), (a,), (lambda g: g.reshape(av.shape),))


def _is_basic(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int, np.integer)) or p is None or p is Ellipsis for p in parts)


def getitem(a, index):
    av = value_of(a)
    out = av[index]
    basic = _is_basic(index)

    def vjp(g):
        full = np.zeros_like(av)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return full

    return custom(out, (a,), (vjp,))
