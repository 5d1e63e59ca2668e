"""Dense double-precision primitives.

A "matrix" is a float64 ``numpy.ndarray`` with ``ndim == 2``.  Most
operations also accept stacks of matrices (leading batch axes) and count
FLOPs for the whole stack.
"""

from __future__ import annotations

import math

import numpy as np

from .flops import record


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def _arr(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim < 2:
        raise ShapeError(f"expected a matrix or stack of matrices, got shape {a.shape}")
    return a


def _require_nonempty(m: np.ndarray, op: str) -> None:
    if m.size == 0:
        raise ShapeError(f"{op} of an empty matrix (shape {m.shape})")


def matmul(a, b) -> np.ndarray:
    a, b = _arr(a), _arr(b)
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a @ b
    batch = math.prod(out.shape[:-2])
    record(macs=batch * a.shape[-2] * a.shape[-1] * b.shape[-1])
    return out


def transpose(m) -> np.ndarray:
    return np.swapaxes(_arr(m), -1, -2)


def add(a, b) -> np.ndarray:
    out = np.add(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
    record(adds=out.size)
    return out


def sub(a, b) -> np.ndarray:
    out = np.subtract(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
    record(adds=out.size)
    return out


def scale(m, c: float) -> np.ndarray:
    out = np.asarray(m, dtype=np.float64) * float(c)
    record(macs=out.size)
    return out


def mul(a, b) -> np.ndarray:
    """Elementwise (broadcasting) product, one MAC per output entry."""
    out = np.multiply(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))
    record(macs=out.size)
    return out


def exp(m) -> np.ndarray:
    out = np.exp(np.asarray(m, dtype=np.float64))
    record(exps=out.size)
    return out


def softmax_rows(m) -> np.ndarray:
    """Row-wise softmax along the last axis, shifted by the row maximum.

    Booked per entry: one compare (max scan), two adds (shift, sum), one
    exp and one division.
    """
    m = _arr(m)
    _require_nonempty(m, "softmax_rows")
    shifted = m - m.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    record(cmps=m.size, adds=2 * m.size, exps=m.size, divs=m.size)
    return out


def relu(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    record(cmps=m.size)
    return np.maximum(m, 0.0)


def global_max(m) -> float:
    """Largest entry; ties go to the lowest row-major index (see ``argmax_flat``)."""
    m = np.asarray(m, dtype=np.float64)
    _require_nonempty(m, "global_max")
    record(cmps=m.size)
    return float(m.reshape(-1)[int(np.argmax(m))])


def argmax_flat(m) -> int:
    m = np.asarray(m, dtype=np.float64)
    _require_nonempty(m, "argmax_flat")
    return int(np.argmax(m))


def row_max(m) -> np.ndarray:
    m = _arr(m)
    _require_nonempty(m, "row_max")
    record(cmps=m.size)
    return m.max(axis=-1)


def concat_rows(*ms) -> np.ndarray:
    arrs = [_arr(m) for m in ms]
    return np.concatenate(arrs, axis=-2)


def numerical_rank(m, tol: float = 1e-8) -> int:
    """Count singular values above ``tol`` times the largest one."""
    if not tol > 0:
        raise ValueError(f"tol must be positive, got {tol}")
    m = as_matrix(m)
    if not np.all(np.isfinite(m)):
        raise ValueError("numerical_rank: matrix has non-finite entries")
    if m.size == 0:
        return 0
    sv = np.linalg.svd(m, compute_uv=False)
    if sv[0] == 0.0:
        return 0
    return int(np.count_nonzero(sv > tol * sv[0]))
