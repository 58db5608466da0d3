"""Small dense-array arithmetic with reverse-mode differentiation.

Every operation accepts either plain numbers/arrays or :class:`Node` objects.
When no operand lives on a :class:`Tape` the operation returns a plain
``float64`` ndarray, so inference code runs on the same functions without
recording anything.  When at least one operand is a node, the result is a new
node appended to that tape together with a closure that maps the output
cotangent to the input cotangents.

Because nodes are appended in creation order, walking the tape backwards is a
valid reverse topological order and no graph sort is needed.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "DegenerateVectorError",
    "Node",
    "Tape",
    "add",
    "as_array",
    "concat",
    "cosine_similarity",
    "detach",
    "div",
    "dot",
    "entropy_from_logits",
    "exp",
    "grad",
    "log",
    "log_softmax",
    "logsumexp",
    "matmul",
    "max_",
    "mul",
    "neg",
    "norm",
    "normalize",
    "relu",
    "reshape",
    "row_cosine",
    "sigmoid",
    "softmax",
    "softplus",
    "softplus_inverse",
    "sub",
    "sum_",
    "take",
    "tanh",
    "value",
]

Array = np.ndarray


class DegenerateVectorError(ValueError):
    """Raised when a vector with zero norm must be normalized."""


class Node:
    __slots__ = ("value", "tape", "index", "parents", "vjp")

    def __init__(self, value: Array, tape: "Tape", parents=(), vjp=None):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.vjp = vjp
        self.index = tape._record(self)

    @property
    def shape(self):
        return self.value.shape

    def __float__(self):
        return float(self.value)

    def __repr__(self):
        return f"Node(index={self.index}, shape={self.value.shape})"

    __array_priority__ = 100.0

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)


class Tape:
    """Ordered record of primitive operations plus a parameter registry.

    A tape is meant to live for one loss evaluation; build a new one for the
    next episode.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}

    def _record(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def __len__(self):
        return len(self.nodes)

    def param(self, name: str, val) -> Node:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already registered")
        node = Node(np.array(val, dtype=np.float64), self)
        self.params[name] = node
        return node

    def variable(self, val) -> Node:
        """An unnamed leaf whose gradient can be requested via ``wrt``."""
        return Node(np.array(val, dtype=np.float64), self)

    def backward(self, loss: Node) -> list:
        if not isinstance(loss, Node) or loss.tape is not self:
            raise ValueError("loss is not a node on this tape")
        if loss.value.size != 1:
            raise ValueError("loss must be a scalar node")
        grads: list = [None] * len(self.nodes)
        grads[loss.index] = np.ones_like(loss.value)
        for i in range(loss.index, -1, -1):
            g = grads[i]
            if g is None:
                continue
            node = self.nodes[i]
            if node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if parent is None or pg is None:
                    continue
                j = parent.index
                if grads[j] is None:
                    grads[j] = pg
                else:
                    grads[j] = grads[j] + pg
        return grads


def grad(tape: Tape, loss: Node, wrt: Sequence[Node] | None = None) -> dict:
    """Gradient of ``loss`` with respect to every registered parameter.

    Unreached parameters get an all-zero gradient.  If ``wrt`` is given the
    result additionally maps ``id(node)`` to that node's gradient.
    """
    grads = tape.backward(loss)
    out = {}
    for name, node in tape.params.items():
        g = grads[node.index]
        out[name] = np.zeros_like(node.value) if g is None else np.asarray(g).reshape(node.value.shape)
    for node in wrt or ():
        g = grads[node.index]
        out[id(node)] = np.zeros_like(node.value) if g is None else np.asarray(g).reshape(node.value.shape)
    return out


# -- helpers ---------------------------------------------------------------


def value(x) -> Array:
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


as_array = value


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    return None


def _node_or_none(x):
    return x if isinstance(x, Node) else None


def _unbroadcast(g: Array, shape) -> Array:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _make(out: Array, tape: Tape | None, parents, vjp: Callable):
    if tape is None:
        return out
    return Node(out, tape, tuple(_node_or_none(p) for p in parents), vjp)


def detach(x) -> Array:
    return np.array(value(x), copy=True)


# -- elementwise arithmetic ------------------------------------------------


def add(a, b):
    av, bv = value(a), value(b)
    out = av + bv
    return _make(out, _tape_of(a, b), (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b):
    av, bv = value(a), value(b)
    out = av - bv
    return _make(out, _tape_of(a, b), (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)))


def mul(a, b):
    av, bv = value(a), value(b)
    out = av * bv
    return _make(
        out, _tape_of(a, b), (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def div(a, b):
    av, bv = value(a), value(b)
    out = av / bv
    return _make(
        out, _tape_of(a, b), (a, b),
        lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)),
    )


def neg(a):
    return _make(-value(a), _tape_of(a), (a,), lambda g: (-g,))


def exp(a):
    out = np.exp(value(a))
    return _make(out, _tape_of(a), (a,), lambda g: (g * out,))


def log(a):
    av = value(a)
    return _make(np.log(av), _tape_of(a), (a,), lambda g: (g / av,))


def tanh(a):
    out = np.tanh(value(a))
    return _make(out, _tape_of(a), (a,), lambda g: (g * (1.0 - out * out),))


def relu(a):
    av = value(a)
    mask = av > 0
    return _make(np.where(mask, av, 0.0), _tape_of(a), (a,), lambda g: (g * mask,))


def _sigmoid_value(x: Array) -> Array:
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a):
    out = _sigmoid_value(value(a))
    return _make(out, _tape_of(a), (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a):
    av = value(a)
    out = np.logaddexp(0.0, av)
    return _make(out, _tape_of(a), (a,), lambda g: (g * _sigmoid_value(av),))


def softplus_inverse(y: float) -> float:
    """Raw value whose softplus equals ``y`` (y > 0)."""
    if y <= 0:
        raise ValueError("softplus_inverse requires a positive argument")
    return float(y + math.log(-math.expm1(-y)))


# -- shape and linear algebra ----------------------------------------------


def matmul(a, b):
    av, bv = value(a), value(b)
    out = av @ bv

    def vjp(g):
        if av.ndim == 2 and bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        if av.ndim == 1 and bv.ndim == 2:
            return bv @ g, np.outer(av, g)
        return g @ bv.T, av.T @ g

    return _make(out, _tape_of(a, b), (a, b), vjp)


def dot(a, b):
    av, bv = value(a), value(b)
    out = np.asarray(av @ bv, dtype=np.float64)
    return _make(out, _tape_of(a, b), (a, b), lambda g: (g * bv, g * av))


def reshape(a, shape):
    av = value(a)
    return _make(av.reshape(shape), _tape_of(a), (a,), lambda g: (g.reshape(av.shape),))


def take(a, idx):
    """Index along the leading axis (int, slice, or integer array)."""
    av = value(a)
    out = np.array(av[idx], dtype=np.float64)

    def vjp(g):
        full = np.zeros_like(av)
        if isinstance(idx, (int, np.integer, slice)):
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(out, _tape_of(a), (a,), vjp)


def concat(parts: Sequence, axis: int = 0):
    vals = [value(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, _tape_of(*parts), tuple(parts), vjp)


def sum_(a):
    av = value(a)
    return _make(np.asarray(av.sum()), _tape_of(a), (a,), lambda g: (np.broadcast_to(g, av.shape).copy(),))


def max_(a):
    """Maximum of a vector; the subgradient goes to the lowest maximizing index."""
    av = value(a)
    if av.size == 0:
        raise ValueError("max of empty vector")
    k = int(np.argmax(av))

    def vjp(g):
        out = np.zeros_like(av)
        out[k] = g
        return (out,)

    return _make(np.asarray(av[k]), _tape_of(a), (a,), vjp)


# -- reductions with stable forms ------------------------------------------


def _check_nonempty(av: Array, what: str):
    if av.size == 0:
        raise ValueError(f"{what} of empty vector")


def logsumexp(a):
    av = value(a)
    _check_nonempty(av, "logsumexp")
    m = av.max()
    e = np.exp(av - m)
    s = e.sum()
    out = np.asarray(m + math.log(s))
    return _make(out, _tape_of(a), (a,), lambda g: (g * e / s,))


def softmax(a):
    av = value(a)
    _check_nonempty(av, "softmax")
    e = np.exp(av - av.max())
    out = e / e.sum()
    return _make(out, _tape_of(a), (a,), lambda g: (out * (g - np.dot(g, out)),))


def log_softmax(a):
    av = value(a)
    _check_nonempty(av, "log_softmax")
    shifted = av - av.max()
    lse = math.log(np.exp(shifted).sum())
    out = shifted - lse
    p = np.exp(out)
    return _make(out, _tape_of(a), (a,), lambda g: (g - p * g.sum(),))


def entropy_from_logits(a):
    """Shannon entropy (nats) of softmax(a), with 0 log 0 = 0."""
    av = value(a)
    _check_nonempty(av, "entropy")
    shifted = av - av.max()
    logp = shifted - math.log(np.exp(shifted).sum())
    p = np.exp(logp)
    h = -float(np.sum(p * logp))
    # dH/da = -p * (logp + H)
    return _make(np.asarray(h), _tape_of(a), (a,), lambda g: (-g * p * (logp + h),))


def norm(a):
    av = value(a)
    n = float(np.sqrt(av @ av))
    return _make(np.asarray(n), _tape_of(a), (a,), lambda g: (g * av / n,))


def normalize(a):
    """Scale a vector to unit Euclidean norm."""
    av = value(a)
    n = float(np.sqrt(av @ av))
    if not n > 0.0:
        raise DegenerateVectorError("degenerate vector")
    out = av / n
    return _make(out, _tape_of(a), (a,), lambda g: ((g - out * (g @ out)) / n,))


def cosine_similarity(a, b):
    av, bv = value(a), value(b)
    if av.shape != bv.shape:
        raise ValueError(f"shape mismatch {av.shape} vs {bv.shape}")
    na, nb = float(np.sqrt(av @ av)), float(np.sqrt(bv @ bv))
    if not (na > 0.0 and nb > 0.0):
        raise DegenerateVectorError("degenerate vector")
    c = float(av @ bv) / (na * nb)
    out = np.asarray(c)

    def vjp(g):
        ga = g * (bv / (na * nb) - c * av / (na * na))
        gb = g * (av / (na * nb) - c * bv / (nb * nb))
        return ga, gb

    return _make(out, _tape_of(a, b), (a, b), vjp)


def row_cosine(P, z):
    """Cosine similarity of each row of ``P`` with ``z``."""
    Pv, zv = value(P), value(z)
    row_n = np.sqrt(np.einsum("ij,ij->i", Pv, Pv))
    zn = float(np.sqrt(zv @ zv))
    if not (zn > 0.0 and np.all(row_n > 0.0)):
        raise DegenerateVectorError("degenerate vector")
    dots = Pv @ zv
    out = dots / (row_n * zn)

    def vjp(g):
        gd = g / (row_n * zn)
        gP = np.outer(gd, zv) - (g * out / (row_n * row_n))[:, None] * Pv
        gz = Pv.T @ gd - (g @ out) * zv / (zn * zn)
        return gP, gz

    return _make(out, _tape_of(P, z), (P, z), vjp)
