"""Tape-based reverse-mode differentiation over the numkit op set.

Values may be single matrices or stacks of matrices; broadcasting follows
numpy, and gradients are summed back to each operand's shape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class TapeError(ValueError):
    pass


@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...]
    value: np.ndarray
    vjp: Callable | None = None
    name: str | None = None
    trainable: bool = False
    requires_grad: bool = False


@dataclass
class Kink:
    """A non-smooth decision taken during the forward pass."""

    kind: str
    node: int
    margin: float
    key: bytes = field(repr=False)


class Tape:
    def __init__(self, track_kinks: bool = False):
        self.nodes: list[Node] = []
        self.track_kinks = track_kinks
        self.kinks: list[Kink] = []

    def _push(self, node: Node) -> Var:
        self.nodes.append(node)
        return Var(self, len(self.nodes) - 1)

    def leaf(self, value, name: str | None = None, trainable: bool = True) -> Var:
        value = np.array(value, dtype=np.float64)
        return self._push(
            Node("leaf", (), value, name=name, trainable=trainable, requires_grad=trainable)
        )

    def const(self, value) -> Var:
        return self._push(Node("const", (), np.asarray(value, dtype=np.float64)))

    def record(self, kind: str, inputs: tuple[Var, ...], value, vjp) -> Var:
        for v in inputs:
            if v.tape is not self:
                raise TapeError("operands belong to different tapes")
        req = any(self.nodes[v.index].requires_grad for v in inputs)
        return self._push(
            Node(kind, tuple(v.index for v in inputs), value, vjp if req else None, requires_grad=req)
        )

    def note_kink(self, kind: str, index: int, margin: float, key: bytes) -> None:
        if self.track_kinks:
            self.kinks.append(Kink(kind, index, float(margin), key))

    def signature(self) -> tuple:
        return tuple((k.kind, k.key) for k in self.kinks)

    def min_margin(self) -> float:
        return min((k.margin for k in self.kinks), default=math.inf)

    def leaves(self, trainable_only: bool = True) -> list[Var]:
        out = []
        for i, node in enumerate(self.nodes):
            if node.kind == "leaf" and (node.trainable or not trainable_only):
                out.append(Var(self, i))
        return out


class Var:
    __slots__ = ("tape", "index")
    __array_priority__ = 1000

    def __init__(self, tape: Tape, index: int):
        self.tape = tape
        self.index = index

    @property
    def node(self) -> Node:
        return self.tape.nodes[self.index]

    @property
    def value(self) -> np.ndarray:
        return self.node.value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var({self.node.kind}#{self.index}, shape={self.shape})"

    def __add__(self, other):
        from .ops import add
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from .ops import sub
        return sub(self, other)

    def __rsub__(self, other):
        from .ops import sub
        return sub(other, self)

    def __mul__(self, other):
        from .ops import mul
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        from .ops import matmul
        return matmul(self, other)

    def __rmatmul__(self, other):
        from .ops import matmul
        return matmul(other, self)

    def __neg__(self):
        from .ops import scale
        return scale(self, -1.0)

    @property
    def T(self):
        from .ops import transpose
        return transpose(self)


def backward(loss: Var) -> dict:
    """Reverse sweep from a scalar ``loss``.

    Returns gradients for every trainable leaf, keyed by leaf name (or by
    the ``Var`` itself for unnamed leaves).  Leaves unreachable from the
    loss get zeros.  Constants never receive gradients.
    """
    if loss.value.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.value.shape}")
    tape = loss.tape
    grads: dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}
    for i in range(loss.index, -1, -1):
        g = grads.pop(i, None) if tape.nodes[i].kind != "leaf" else grads.get(i)
        node = tape.nodes[i]
        if g is None or node.vjp is None:
            continue
        for j, gj in zip(node.inputs, node.vjp(g)):
            if gj is None or not tape.nodes[j].requires_grad:
                continue
            grads[j] = gj if j not in grads else grads[j] + gj
    out = {}
    for leaf in tape.leaves():
        key = leaf.node.name if leaf.node.name is not None else leaf
        g = grads.get(leaf.index)
        out[key] = np.zeros_like(leaf.value) if g is None else np.asarray(g).reshape(leaf.shape)
    return out


def as_var(tape: Tape, x) -> Var:
    if isinstance(x, Var):
        return x
    return tape.const(x)

