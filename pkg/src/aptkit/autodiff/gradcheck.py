"""Central finite-difference checks of tape gradients."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .tape import Tape, Var, backward

EXHAUSTIVE_LIMIT = 10_000
SAMPLE_SIZE = 512


class NonFiniteError(ValueError):
    pass


@dataclass
class GradRow:
    param: str
    coord: tuple[int, ...]
    analytic: float
    numeric: float
    excluded: bool = False

    @property
    def abs_err(self) -> float:
        return abs(self.analytic - self.numeric)

    @property
    def rel_err(self) -> float:
        return self.abs_err / max(abs(self.analytic), abs(self.numeric), 1e-8)


@dataclass
class GradReport:
    rows: list[GradRow] = field(default_factory=list)
    tol: float = 1e-5

    def _checked(self, param: str | None = None):
        return [
            r for r in self.rows if not r.excluded and (param is None or r.param == param)
        ]

    @property
    def params(self) -> list[str]:
        return list(dict.fromkeys(r.param for r in self.rows))

    def max_rel_err(self, param: str | None = None) -> float:
        return max((r.rel_err for r in self._checked(param)), default=0.0)

    def max_abs_err(self, param: str | None = None) -> float:
        return max((r.abs_err for r in self._checked(param)), default=0.0)

    @property
    def failing(self) -> list[GradRow]:
        return [r for r in self._checked() if r.rel_err >= self.tol]

    @property
    def excluded(self) -> list[GradRow]:
        return [r for r in self.rows if r.excluded]

    @property
    def passed(self) -> bool:
        return not self.failing

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["param", "coord", "analytic", "numeric", "rel_err"])
        for r in self.rows:
            coord = "_".join(str(c) for c in r.coord)
            rel = "excluded" if r.excluded else repr(r.rel_err)
            w.writerow([r.param, coord, repr(r.analytic), repr(r.numeric), rel])
        return out.getvalue()


def _evaluate(fn, params: dict[str, np.ndarray]) -> tuple[float, tuple]:
    tape = Tape(track_kinks=True)
    leaves = {k: tape.leaf(v, name=k) for k, v in params.items()}
    out = fn(tape, leaves)
    return float(np.asarray(out.value).reshape(-1)[0]), tape.signature()


def gradcheck(
    fn: Callable[[Tape, dict[str, Var]], Var],
    params: dict[str, np.ndarray],
    eps: float = 1e-5,
    tol: float = 1e-5,
    rng: np.random.Generator | None = None,
) -> GradReport:
    """Compare tape gradients of ``fn`` with central differences.

    ``fn(tape, leaves)`` must build a scalar loss from the leaf ``Var``s.  A
    coordinate whose +/-eps probes change any ReLU mask or max selection is
    a non-smooth point: it is reported as excluded rather than compared.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    rng = np.random.default_rng(0) if rng is None else rng
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    tape = Tape(track_kinks=True)
    leaves = {k: tape.leaf(v, name=k) for k, v in params.items()}
    loss = fn(tape, leaves)
    if not np.all(np.isfinite(loss.value)):
        raise NonFiniteError("loss is non-finite at the base point")
    base_sig = tape.signature()
    grads = backward(loss)

    report = GradReport(tol=tol)
    for name, value in params.items():
        size = value.size
        if size > EXHAUSTIVE_LIMIT:
            flat = rng.choice(size, SAMPLE_SIZE, replace=False)
        else:
            flat = np.arange(size)
        for k in flat:
            coord = np.unravel_index(int(k), value.shape)
            probe = {kk: vv.copy() for kk, vv in params.items()}
            probe[name][coord] = value[coord] + eps
            f_plus, sig_plus = _evaluate(fn, probe)
            probe[name][coord] = value[coord] - eps
            f_minus, sig_minus = _evaluate(fn, probe)
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NonFiniteError(f"non-finite loss probing {name}{tuple(map(int, coord))}")
            report.rows.append(
                GradRow(
                    param=name,
                    coord=tuple(int(c) for c in coord),
                    analytic=float(grads[name][coord]),
                    numeric=(f_plus - f_minus) / (2 * eps),
                    excluded=sig_plus != base_sig or sig_minus != base_sig,
                )
            )
    return report
