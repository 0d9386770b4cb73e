"""Minimal reverse-mode automatic differentiation on numpy arrays.

A :class:`Tape` records operations in creation order; :func:`backward` runs
one reverse sweep over the tape, calling each node's saved vector-Jacobian
closure.  Node values are float64 arrays (a scalar loss is a 0-d array), so
a whole minibatch flows through one node rather than one node per scalar.

Operands may be ``Var`` (tracked) or plain arrays/floats (constants).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class AutodiffUsageError(RuntimeError):
    pass


@dataclass
class Node:
    value: np.ndarray
    parents: tuple[int, ...]
    vjp: object  # callable(g) -> tuple of parent cotangents, or None for leaves
    kind: str


class Var:
    __slots__ = ("tape", "idx")

    def __init__(self, tape: "Tape", idx: int):
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.idx].value

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    def __init__(self):
        self.nodes: list[Node] = []

    def push(self, value, parents=(), vjp=None, kind="op") -> Var:
        value = np.asarray(value, dtype=np.float64)
        self.nodes.append(Node(value, tuple(parents), vjp, kind))
        return Var(self, len(self.nodes) - 1)

    def leaf(self, value, kind="leaf") -> Var:
        return self.push(value, (), None, kind)


class Gradients:
    def __init__(self, tape: Tape, buffers: list):
        self._tape = tape
        self._buffers = buffers

    def get(self, var: Var) -> np.ndarray:
        g = self._buffers[var.idx]
        if g is None:
            return np.zeros_like(var.value)
        return g


def backward(tape: Tape, loss: Var) -> Gradients:
    """Reverse accumulation from a scalar loss node over the whole tape."""
    if loss.tape is not tape or not (0 <= loss.idx < len(tape.nodes)):
        raise AutodiffUsageError("loss node does not belong to this tape")
    if np.asarray(loss.value).size != 1:
        raise AutodiffUsageError("backward requires a scalar loss node")
    grads: list = [None] * len(tape.nodes)
    grads[loss.idx] = np.ones_like(tape.nodes[loss.idx].value)
    for i in range(loss.idx, -1, -1):
        g = grads[i]
        if g is None:
            continue
        node = tape.nodes[i]
        if node.vjp is None:
            continue
        for parent, contrib in zip(node.parents, node.vjp(g)):
            if contrib is None:
                continue
            if grads[parent] is None:
                grads[parent] = np.array(contrib, dtype=np.float64, copy=True)
            else:
                grads[parent] += contrib
    return Gradients(tape, grads)


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape` (reverses numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _split(a, b):
    """Normalize a two-operand op: returns (tape, a_var|None, b_var|None, aval, bval)."""
    ta = a.tape if isinstance(a, Var) else None
    tb = b.tape if isinstance(b, Var) else None
    tape = ta or tb
    if tape is None:
        raise AutodiffUsageError("at least one operand must be a Var")
    aval = a.value if isinstance(a, Var) else np.asarray(a, dtype=np.float64)
    bval = b.value if isinstance(b, Var) else np.asarray(b, dtype=np.float64)
    return tape, (a if isinstance(a, Var) else None), (b if isinstance(b, Var) else None), aval, bval


def _binary(a, b, out, da, db, kind):
    tape, av, bv, aval, bval = _split(a, b)
    parents = []
    sides = []
    if av is not None:
        parents.append(av.idx)
        sides.append(("a", aval.shape))
    if bv is not None:
        parents.append(bv.idx)
        sides.append(("b", bval.shape))

    def vjp(g):
        outs = []
        for side, shape in sides:
            raw = da(g) if side == "a" else db(g)
            outs.append(_unbroadcast(raw, shape))
        return tuple(outs)

    return tape.push(out, parents, vjp, kind)


def add(a, b):
    _, _, _, aval, bval = _split(a, b)
    return _binary(a, b, aval + bval, lambda g: g, lambda g: g, "add")


def sub(a, b):
    _, _, _, aval, bval = _split(a, b)
    return _binary(a, b, aval - bval, lambda g: g, lambda g: -g, "sub")


def mul(a, b):
    _, _, _, aval, bval = _split(a, b)
    return _binary(a, b, aval * bval, lambda g: g * bval, lambda g: g * aval, "mul")


def neg(a):
    return a.tape.push(-a.value, (a.idx,), lambda g: (-g,), "neg")


def matmul(a, b):
    _, _, _, aval, bval = _split(a, b)
    return _binary(a, b, aval @ bval,
                   lambda g: g @ bval.T, lambda g: aval.T @ g, "matmul")


def relu(a: Var) -> Var:
    mask = a.value > 0.0
    return a.tape.push(np.where(mask, a.value, 0.0), (a.idx,),
                       lambda g: (g * mask,), "relu")


def sigmoid(a: Var) -> Var:
    s = 1.0 / (1.0 + np.exp(-a.value))
    return a.tape.push(s, (a.idx,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def vabs(a: Var) -> Var:
    sign = np.sign(a.value)
    return a.tape.push(np.abs(a.value), (a.idx,), lambda g: (g * sign,), "abs")


def minimum(a: Var, const) -> Var:
    """Elementwise min with a constant; ties take the constant branch (zero grad)."""
    c = np.asarray(const, dtype=np.float64)
    mask = a.value < c
    return a.tape.push(np.where(mask, a.value, c), (a.idx,),
                       lambda g: (g * mask,), "minimum")


def vsum(a: Var, axis=None) -> Var:
    shape = a.value.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return a.tape.push(a.value.sum(axis=axis), (a.idx,), vjp, "sum")


def vmean(a: Var, axis=None) -> Var:
    shape = a.value.shape
    count = a.value.size if axis is None else shape[axis]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape) / count,)
        return (np.broadcast_to(np.expand_dims(g, axis), shape) / count,)

    return a.tape.push(a.value.mean(axis=axis), (a.idx,), vjp, "mean")


def custom(tape: Tape, value, parents: list[Var], vjp, kind="custom") -> Var:
    """Register an externally computed op with a hand-written VJP.

    ``vjp(g)`` must return one cotangent per parent, in order.
    """
    return tape.push(value, [p.idx for p in parents], vjp, kind)
