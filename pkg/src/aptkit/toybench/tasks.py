"""Synthetic adaptation tasks: match a teacher whose value maps were nudged.

Inputs are two-segment token sequences; each segment lives in its own half
of the embedding space and carries its own offset, a stand-in for a mixed
image/text token stream.  Targets come from a teacher copy of the frozen
model with a rank-k perturbation on every ``W_v``, so a new head alone
cannot fit them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .forward import frozen_features
from .model import FrozenModel

KINDS = ("regression-shift", "token-classification")
MIN_GAP = 0.1
MAX_ATTEMPTS = 10


class TaskError(RuntimeError):
    pass


@dataclass(frozen=True)
class TaskDefaults:
    d: int = 32
    depth: int = 2
    out_dim: int = 4
    segments: tuple[int, int] = (4, 4)
    n_train: int = 256
    n_val: int = 32
    rank: int = 2
    magnitude: float = 3.0
    ridge: float = 1e-6


@dataclass(eq=False)
class Split:
    x: np.ndarray
    y: np.ndarray  # (N, n, out) targets, or (N, n) integer labels

    @property
    def size(self) -> int:
        return self.x.shape[0]


@dataclass(eq=False)
class TaskSpec:
    kind: str
    seed: int
    model: FrozenModel
    teacher: FrozenModel
    train: Split
    val: Split
    segments: tuple[int, int]
    target_scale: float
    gap: float
    attempts: int
    magnitude: float
    rank: int

    @property
    def seq_len(self) -> int:
        return sum(self.segments)

    def segment_of(self, token: int) -> int:
        return 0 if token < self.segments[0] else 1

    def classifier_init(self) -> np.ndarray:
        """Starting point of the trainable head: the pretrained head, in target units."""
        return np.array(self.model.head / self.target_scale)


def sample_inputs(rng: np.random.Generator, count: int, d: int, segments: tuple[int, int], basis, offsets):
    half = d // 2
    parts = []
    for seg, n_seg in enumerate(segments):
        z = rng.normal(size=(count, n_seg, half))
        cols = basis[:, seg * half:(seg + 1) * half]
        parts.append(z @ cols.T + offsets[seg])
    return np.concatenate(parts, axis=1)


def _flatten(a: np.ndarray) -> np.ndarray:
    return a.reshape(-1, a.shape[-1])


def _oracle_head(feats: np.ndarray, targets: np.ndarray, ridge: float) -> np.ndarray:
    f, t = _flatten(feats), _flatten(targets)
    gram = f.T @ f + ridge * np.eye(f.shape[1])
    return np.linalg.solve(gram, f.T @ t)


def classifier_floor(task: TaskSpec, ridge: float = 1e-6) -> float:
    """Best val loss reachable by retraining only the head (least squares).

    For token classification the loss is the error rate of the
    least-squares one-hot classifier.
    """
    tr, va = frozen_features(task.model, task.train.x), frozen_features(task.model, task.val.x)
    if task.kind == "regression-shift":
        w = _oracle_head(tr, task.train.y, ridge)
        return float(np.mean((va @ w - task.val.y) ** 2))
    onehot = np.eye(task.model.out_dim)[task.train.y]
    w = _oracle_head(tr, onehot, ridge)
    return float(np.mean(np.argmax(va @ w, axis=-1) != task.val.y))


def _build(seed: int, kind: str, model: FrozenModel, cfg: TaskDefaults, magnitude: float) -> TaskSpec:
    rng = np.random.default_rng([seed, 1])
    d = model.d
    basis, _ = np.linalg.qr(rng.normal(size=(d, d)))
    offsets = rng.normal(0.0, 1.0 / math.sqrt(d), (2, d))
    teacher = model.perturbed(cfg.rank, magnitude, rng)
    x_tr = sample_inputs(rng, cfg.n_train, d, cfg.segments, basis, offsets)
    x_va = sample_inputs(rng, cfg.n_val, d, cfg.segments, basis, offsets)
    y_tr = frozen_features(teacher, x_tr) @ teacher.head
    y_va = frozen_features(teacher, x_va) @ teacher.head
    if kind == "regression-shift":
        scale = float(np.std(y_tr))
        train, val = Split(x_tr, y_tr / scale), Split(x_va, y_va / scale)
    else:
        scale = float(np.std(y_tr))
        train = Split(x_tr, np.argmax(y_tr, axis=-1))
        val = Split(x_va, np.argmax(y_va, axis=-1))
    return TaskSpec(kind, seed, model, teacher, train, val, cfg.segments, scale, 0.0, 0, magnitude, cfg.rank)


def default_model(seed: int, cfg: TaskDefaults = TaskDefaults()) -> FrozenModel:
    return FrozenModel.random(cfg.d, cfg.depth, cfg.out_dim, np.random.default_rng([seed, 0]))


def make_task(
    seed: int,
    kind: str = "regression-shift",
    model: FrozenModel | None = None,
    cfg: TaskDefaults = TaskDefaults(),
    magnitude: float | None = None,
    min_gap: float = MIN_GAP,
) -> TaskSpec:
    """Deterministic task for ``seed``; resamples (derived seeds) until the head-only gap exceeds ``min_gap``."""
    if kind not in KINDS:
        raise ValueError(f"unknown task kind {kind!r}; expected one of {', '.join(KINDS)}")
    model = default_model(seed, cfg) if model is None else model
    magnitude = cfg.magnitude if magnitude is None else magnitude
    gaps = []
    for attempt in range(MAX_ATTEMPTS):
        derived = seed if attempt == 0 else seed * 1000 + attempt
        task = _build(derived, kind, model, cfg, magnitude)
        gap = classifier_floor(task, cfg.ridge)
        gaps.append(gap)
        if gap > min_gap:
            task.seed, task.gap, task.attempts = seed, gap, attempt + 1
            return task
    raise TaskError(
        f"teacher-student gap stayed below {min_gap} after {MAX_ATTEMPTS} attempts "
        f"(best {max(gaps):.3g}); increase the perturbation magnitude"
    )
