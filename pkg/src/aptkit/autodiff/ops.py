"""Differentiable operations recorded on a :class:`Tape`.

Forward values come from :mod:`aptkit.numkit`, so FLOP counting applies
to traced forwards as well.  Any operand that is not a ``Var`` is treated
as a constant.
"""

from __future__ import annotations

import numpy as np

from .. import numkit as nk
from .tape import Tape, TapeError, Var


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise TapeError("at least one operand must be a Var")


def _lift(tape: Tape, *xs) -> tuple[Var, ...]:
    return tuple(x if isinstance(x, Var) else tape.const(x) for x in xs)


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (undoing numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def matmul(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a, b)
    av, bv = a.value, b.value

    def vjp(g):
        ga = unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)
        gb = unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return ga, gb

    return tape.record("matmul", (a, b), nk.matmul(av, bv), vjp)


def add(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a, b)
    sa, sb = a.shape, b.shape
    return tape.record(
        "add", (a, b), nk.add(a.value, b.value),
        lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)),
    )


def sub(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a, b)
    sa, sb = a.shape, b.shape
    return tape.record(
        "sub", (a, b), nk.sub(a.value, b.value),
        lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)),
    )


def mul(a, b) -> Var:
    """Elementwise product with broadcasting (covers scalar-Var scaling)."""
    tape = _tape_of(a, b)
    a, b = _lift(tape, a, b)
    av, bv = a.value, b.value

    def vjp(g):
        return unbroadcast(g * bv, av.shape), unbroadcast(g * av, bv.shape)

    return tape.record("mul", (a, b), nk.mul(av, bv), vjp)


def scale(a: Var, c: float) -> Var:
    c = float(c)
    return a.tape.record("scale", (a,), nk.scale(a.value, c), lambda g: (g * c,))


def transpose(a: Var) -> Var:
    return a.tape.record("transpose", (a,), nk.transpose(a.value), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a: Var, shape: tuple[int, ...]) -> Var:
    old = a.shape
    return a.tape.record("reshape", (a,), a.value.reshape(shape), lambda g: (g.reshape(old),))


def swapaxes(a: Var, i: int, j: int) -> Var:
    return a.tape.record(
        "swapaxes", (a,), np.swapaxes(a.value, i, j), lambda g: (np.swapaxes(g, i, j),)
    )


def broadcast_to(a: Var, shape: tuple[int, ...]) -> Var:
    old = a.shape
    return a.tape.record(
        "broadcast", (a,), np.broadcast_to(a.value, shape).copy(), lambda g: (unbroadcast(g, old),)
    )


def concat_rows(*xs) -> Var:
    """Concatenate along the row axis (``-2``); batch axes must already agree."""
    tape = _tape_of(*xs)
    vs = _lift(tape, *xs)
    sizes = [v.shape[-2] for v in vs]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(g[..., bounds[k]:bounds[k + 1], :] for k in range(len(vs)))

    return tape.record("concat", vs, nk.concat_rows(*(v.value for v in vs)), vjp)


def slice_rows(a: Var, start: int, stop: int | None = None) -> Var:
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[..., start:stop, :] = g
        return (full,)

    return a.tape.record("slice", (a,), a.value[..., start:stop, :], vjp)


def softmax_rows(a: Var) -> Var:
    y = nk.softmax_rows(a.value)

    def vjp(g):
        # row-wise (diag(y) - y y^T) g
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return a.tape.record("softmax", (a,), y, vjp)


def log_softmax_rows(a: Var) -> Var:
    v = a.value
    shifted = v - v.max(axis=-1, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    p = np.exp(y)

    def vjp(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return a.tape.record("log_softmax", (a,), y, vjp)


def relu(a: Var) -> Var:
    v = a.value
    mask = v > 0
    tape = a.tape
    out = tape.record("relu", (a,), nk.relu(v), lambda g: (g * mask,))
    if tape.track_kinks and v.size:
        tape.note_kink("relu", out.index, float(np.min(np.abs(v))), np.packbits(mask).tobytes())
    return out


def global_max(a: Var) -> Var:
    """Maximum entry as a 1x1 matrix; the gradient goes to the first argmax."""
    v = a.value
    idx = nk.argmax_flat(v)
    shape = v.shape

    def vjp(g):
        full = np.zeros(shape)
        full.reshape(-1)[idx] = float(np.sum(g))
        return (full,)

    tape = a.tape
    out = tape.record("global_max", (a,), np.array([[nk.global_max(v)]]), vjp)
    if tape.track_kinks and v.size > 1:
        top = np.sort(v.reshape(-1))[-2:]
        tape.note_kink("max", out.index, float(top[1] - top[0]), np.int64(idx).tobytes())
    return out


def row_max(a: Var) -> Var:
    """Per-row maxima as a ``(..., 1, rows)`` row vector, for column scaling."""
    v = a.value
    idx = np.argmax(v, axis=-1)
    shape = v.shape

    def vjp(g):
        full = np.zeros(shape)
        np.put_along_axis(full, idx[..., None], np.swapaxes(g, -1, -2), axis=-1)
        return (full,)

    out = a.tape.record("row_max", (a,), nk.row_max(v)[..., None, :], vjp)
    tape = a.tape
    if tape.track_kinks and v.shape[-1] > 1:
        top = np.sort(v, axis=-1)[..., -2:]
        tape.note_kink("row_max", out.index, float(np.min(top[..., 1] - top[..., 0])), idx.tobytes())
    return out


def exp(a: Var) -> Var:
    y = nk.exp(a.value)
    return a.tape.record("exp", (a,), y, lambda g: (g * y,))


def square(a: Var) -> Var:
    v = a.value
    return a.tape.record("square", (a,), nk.mul(v, v), lambda g: (2.0 * g * v,))


def sum_all(a: Var) -> Var:
    shape = a.shape
    return a.tape.record(
        "sum", (a,), np.array([[a.value.sum()]]), lambda g: (np.full(shape, float(np.sum(g))),)
    )


def mean_all(a: Var) -> Var:
    return scale(sum_all(a), 1.0 / a.value.size)


def mean_rows(a: Var) -> Var:
    """Average over the row axis, keeping it as a single row."""
    rows = a.shape[-2]
    v = a.value.mean(axis=-2, keepdims=True)
    return a.tape.record("mean_rows", (a,), v, lambda g: (np.broadcast_to(g / rows, a.shape).copy(),))


def pick(a: Var, onehot: np.ndarray) -> Var:
    """Sum of entries selected by a constant 0/1 mask."""
    mask = np.asarray(onehot, dtype=np.float64)
    return sum_all(mul(a, mask))
