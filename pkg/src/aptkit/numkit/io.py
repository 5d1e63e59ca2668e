"""Binary (APTM) and CSV matrix serialization.

APTM layout, all little-endian::

    b"APTM" | u32 version (=1) | u64 rows | u64 cols | rows*cols f64, row-major
"""

from __future__ import annotations

import csv
import io
import struct
from pathlib import Path

import numpy as np

from .ops import as_matrix

MAGIC = b"APTM"
VERSION = 1
_HEADER = struct.Struct("<4sIQQ")
HEADER_SIZE = _HEADER.size


class FormatError(ValueError):
    pass


def matrix_to_bytes(m) -> bytes:
    m = as_matrix(m)
    rows, cols = m.shape
    return _HEADER.pack(MAGIC, VERSION, rows, cols) + m.astype("<f8").tobytes(order="C")


def matrix_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one matrix at ``offset``; return it and the offset past its end."""
    if len(buf) - offset < HEADER_SIZE:
        raise FormatError("truncated APTM header")
    magic, version, rows, cols = _HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported APTM version {version}")
    start = offset + HEADER_SIZE
    end = start + 8 * rows * cols
    if end > len(buf):
        raise FormatError(f"truncated APTM payload: need {end - start} bytes")
    data = np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=start)
    return data.astype(np.float64).reshape(rows, cols), end


def write_matrix(path, m) -> None:
    Path(path).write_bytes(matrix_to_bytes(m))


def read_matrix(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    m, end = matrix_from_bytes(buf)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after matrix")
    return m


def matrix_to_csv(m) -> str:
    m = as_matrix(m)
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["row", "col", "value"])
    for (i, j), v in np.ndenumerate(m):
        w.writerow([i, j, repr(float(v))])
    return out.getvalue()


def matrix_from_csv(text: str) -> np.ndarray:
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows:
        return np.zeros((0, 0))
    n = 1 + max(int(r["row"]) for r in rows)
    k = 1 + max(int(r["col"]) for r in rows)
    m = np.zeros((n, k))
    for r in rows:
        m[int(r["row"]), int(r["col"])] = float(r["value"])
    return m


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest")


def save_tensors(path, tensors: dict) -> None:
    """Write named matrices back-to-back as APTM blobs plus a CSV manifest.

    The manifest (``<path>.manifest``) has columns ``name,rows,cols,offset``
    where ``offset`` is the byte offset of each blob in ``path``.
    """
    blob = bytearray()
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["name", "rows", "cols", "offset"])
    for name, m in tensors.items():
        m = as_matrix(m, name)
        w.writerow([name, m.shape[0], m.shape[1], len(blob)])
        blob += matrix_to_bytes(m)
    Path(path).write_bytes(bytes(blob))
    manifest_path(path).write_text(out.getvalue())


def load_tensors(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    tensors = {}
    for r in csv.DictReader(io.StringIO(manifest_path(path).read_text())):
        m, _ = matrix_from_bytes(buf, int(r["offset"]))
        if m.shape != (int(r["rows"]), int(r["cols"])):
            raise FormatError(f"manifest shape mismatch for {r['name']}: {m.shape}")
        tensors[r["name"]] = m
    return tensors
