from . import ops
from .gradcheck import GradReport, GradRow, NonFiniteError, gradcheck
from .tape import Tape, TapeError, Var, backward

__all__ = [
    "GradReport",
    "GradRow",
    "NonFiniteError",
    "Tape",
    "TapeError",
    "Var",
    "backward",
    "gradcheck",
    "ops",
]
