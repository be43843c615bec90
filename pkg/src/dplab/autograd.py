"""Minimal reverse-mode autodiff over float64 numpy arrays.

A :class:`Tape` records every primitive in execution order, so the record is
already topologically sorted; :meth:`Tape.grad` walks it backwards once.
Values are plain ``np.ndarray`` (float64, row-major); :class:`Node` is a
handle into the tape.

    tape = Tape()
    w = tape.leaf(np.array(3.0))
    loss = w * w
    (g,) = tape.grad(loss, [w])   # -> 6.0
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

VJP = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class TapeError(RuntimeError):
    pass


class Node:
    __slots__ = ("tape", "index")

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape._values[self.index]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self):
        return f"Node(#{self.index}, shape={self.shape})"

    def __add__(self, other):
        if isinstance(other, Node):
            return add(self, other)
        return shift(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Node):
            return add(self, scale(other, -1.0))
        return shift(self, -other)

    def __rsub__(self, other):
        return shift(scale(self, -1.0), other)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Node):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Single-owner record of primal values, parent links and VJPs."""

    def __init__(self):
        self._values: list[np.ndarray] = []
        self._parents: list[tuple[int, ...]] = []
        self._vjps: list[VJP | None] = []
        self._consumed = False

    def __len__(self):
        return len(self._values)

    def _record(self, value, parents: tuple[Node, ...] = (), vjp: VJP | None = None) -> Node:
        if self._consumed:
            raise TapeError("tape already consumed by grad(); build a new tape")
        for p in parents:
            if p.tape is not self:
                raise TapeError("cannot mix nodes from different tapes")
        self._values.append(np.asarray(value, dtype=np.float64))
        self._parents.append(tuple(p.index for p in parents))
        self._vjps.append(vjp)
        return Node(self, len(self._values) - 1)

    def leaf(self, value) -> Node:
        return self._record(np.array(value, dtype=np.float64))

    constant = leaf

    def grad(self, loss: Node, wrt: Sequence[Node]) -> list[np.ndarray]:
        """Gradients of scalar ``loss`` w.r.t. each node in ``wrt``.

        Consumes the tape: every node is visited at most once and the
        gradient slots are discarded afterwards.
        """
        if self._consumed:
            raise TapeError("tape already consumed by grad()")
        if loss.tape is not self:
            raise TapeError("loss node belongs to another tape")
        if loss.value.size != 1:
            raise TapeError(f"grad() needs a scalar loss, got shape {loss.shape}")
        slots: list[np.ndarray | None] = [None] * (loss.index + 1)
        slots[loss.index] = np.ones_like(loss.value)
        for i in range(loss.index, -1, -1):
            g = slots[i]
            vjp = self._vjps[i]
            if g is None or vjp is None:
                continue
            for parent, pg in zip(self._parents[i], vjp(g)):
                if pg is None:
                    continue
                slots[parent] = pg if slots[parent] is None else slots[parent] + pg
        self._consumed = True
        out = []
        for node in wrt:
            g = slots[node.index] if node.index < len(slots) else None
            out.append(np.zeros_like(node.value) if g is None else g)
        return out


# primitives ---------------------------------------------------------------

def matmul(a: Node, b: Node) -> Node:
    A, B = a.value, b.value
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0]:
        raise ValueError(f"matmul shape mismatch: {A.shape} @ {B.shape}")
    return a.tape._record(A @ B, (a, b), lambda g: (g @ B.T, A.T @ g))


def transpose(a: Node) -> Node:
    return a.tape._record(a.value.T.copy(), (a,), lambda g: (g.T,))


def add(a: Node, b: Node) -> Node:
    """Same-shape sum, or ``(n, k) + (k,)`` bias broadcast over rows."""
    A, B = a.value, b.value
    if A.shape == B.shape:
        return a.tape._record(A + B, (a, b), lambda g: (g, g))
    if A.ndim == 2 and B.ndim == 1 and A.shape[1] == B.shape[0]:
        return a.tape._record(A + B, (a, b), lambda g: (g, g.sum(axis=0)))
    raise ValueError(f"add shape mismatch: {A.shape} + {B.shape}")


def mul(a: Node, b: Node) -> Node:
    A, B = a.value, b.value
    if A.shape != B.shape:
        raise ValueError(f"mul shape mismatch: {A.shape} * {B.shape}")
    return a.tape._record(A * B, (a, b), lambda g: (g * B, g * A))


def scale(a: Node, s: float) -> Node:
    s = float(s)
    return a.tape._record(a.value * s, (a,), lambda g: (g * s,))


def shift(a: Node, s: float) -> Node:
    return a.tape._record(a.value + float(s), (a,), lambda g: (g,))


def mask(a: Node, m: np.ndarray) -> Node:
    """Elementwise product with a constant 0/1 array."""
    m = np.asarray(m, dtype=np.float64)
    return a.tape._record(a.value * m, (a,), lambda g: (g * m,))


def relu(a: Node) -> Node:
    A = a.value
    on = (A > 0).astype(np.float64)
    return a.tape._record(A * on, (a,), lambda g: (g * on,))


def tanh(a: Node) -> Node:
    out = np.tanh(a.value)
    return a.tape._record(out, (a,), lambda g: (g * (1.0 - out * out),))


def total(a: Node) -> Node:
    shape = a.shape
    return a.tape._record(np.array(a.value.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def mean(a: Node) -> Node:
    return scale(total(a), 1.0 / a.value.size)


def mse(pred: Node, target: np.ndarray) -> Node:
    """``mean_i 0.5 * ||pred_i - target_i||^2`` over the rows of ``pred``."""
    P = pred.value
    T = np.asarray(target, dtype=np.float64).reshape(P.shape)
    r = P - T
    n = P.shape[0]
    return pred.tape._record(np.array(0.5 * np.sum(r * r) / n), (pred,), lambda g: (g * r / n,))


def softmax_cross_entropy(logits: Node, labels: np.ndarray) -> Node:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    Z = logits.value
    labels = np.asarray(labels, dtype=np.int64)
    n = Z.shape[0]
    shifted = Z - Z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logsum[:, None]
    rows = np.arange(n)
    value = -logp[rows, labels].sum() / n

    def vjp(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (g * d / n,)

    return logits.tape._record(np.array(value), (logits,), vjp)


ACTIVATIONS = {
    "relu": relu,
    "tanh": tanh,
    "identity": lambda a: a,
}
