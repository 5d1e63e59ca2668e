"""FLOP accounting for numkit primitives.

Convention: one multiply-accumulate (MAC) is 2 FLOPs; an exp, a division,
a comparison and an addition are 1 FLOP each.  Scalar scaling of an array
is booked as one MAC per entry.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, fields

_FIELDS = ("macs", "exps", "divs", "cmps", "adds")
_local = threading.local()


@dataclass
class FlopCounter:
    macs: int = 0
    exps: int = 0
    divs: int = 0
    cmps: int = 0
    adds: int = 0

    @property
    def total_flops(self) -> int:
        return 2 * self.macs + self.exps + self.divs + self.cmps + self.adds

    def add(self, **counts: int) -> None:
        for key, value in counts.items():
            if value < 0:
                raise ValueError(f"negative count for {key}: {value}")
            setattr(self, key, getattr(self, key) + int(value))

    def as_dict(self) -> dict[str, int]:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["total_flops"] = self.total_flops
        return out

    def __sub__(self, other: FlopCounter) -> FlopCounter:
        return FlopCounter(**{k: getattr(self, k) - getattr(other, k) for k in _FIELDS})


def _stack() -> list[FlopCounter]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


@contextmanager
def count_flops(counter: FlopCounter | None = None):
    """Record every numkit operation executed in this thread into ``counter``.

    Scopes nest; an operation is booked into every enclosing counter.
    """
    counter = FlopCounter() if counter is None else counter
    stack = _stack()
    stack.append(counter)
    try:
        yield counter
    finally:
        stack.pop()


def record(**counts: int) -> None:
    for counter in _stack():
        counter.add(**counts)


def counting() -> bool:
    return bool(_stack())
