"""Full-batch SGD with momentum for each adaptation method."""

from __future__ import annotations

import csv
import io
import os
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .. import numkit as nk
from ..autodiff import Tape, backward, ops
from .forward import METHODS, outputs
from .model import FrozenModel
from .tasks import Split, TaskSpec

DIVERGENCE_FACTOR = 1e3
# Input-space prompts get tiny gradients through the softmax and need a large
# step; APT's update is unnormalised and blows up at the same step size.
PROMPT_LR = {"classifier": 0.1, "shallow": 3.0, "deep": 10.0, "apt": 0.1}


class DivergenceError(RuntimeError):
    def __init__(self, step: int, loss: float, initial: float):
        super().__init__(f"training diverged at step {step}: loss {loss:.4g} vs initial {initial:.4g}")
        self.step = step
        self.loss = loss
        self.initial = initial


@dataclass
class TrainConfig:
    method: str = "apt"
    p: int = 4
    r: int = 2
    lr: float = 0.1
    momentum: float = 0.9
    steps: int = 600
    seed: int = 0
    init_std: float = 0.02
    prompt_lr: float = 0.0  # 0 picks the per-method default

    @property
    def effective_prompt_lr(self) -> float:
        return self.prompt_lr or PROMPT_LR[self.method]

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {', '.join(METHODS)}")
        if self.steps < 0 or self.p < 1 or self.r < 1:
            raise ValueError(f"need steps >= 0, p >= 1, r >= 1 (got {self.steps}, {self.p}, {self.r})")
        if not self.lr > 0 or self.prompt_lr < 0 or not 0 <= self.momentum < 1:
            raise ValueError(
                f"need lr > 0, prompt_lr >= 0 and 0 <= momentum < 1 (got {self.lr}, {self.prompt_lr}, {self.momentum})"
            )

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> TrainConfig:
        raw = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        kw = {}
        for f in fields(cls):
            if f.name in raw:
                kw[f.name] = type(getattr(cls(), f.name))(raw[f.name])
        return cls(**kw)


def init_params(model: FrozenModel, task: TaskSpec, cfg: TrainConfig) -> dict[str, np.ndarray]:
    """Trainable tensors for ``cfg.method``; the head is always among them."""
    if cfg.r > model.d:
        raise ValueError(f"rank {cfg.r} exceeds model width {model.d}")
    rng = np.random.default_rng([cfg.seed, 7])
    d, std = model.d, cfg.init_std
    params = {"head": task.classifier_init()}
    if cfg.method == "shallow":
        params["prompt"] = rng.normal(0.0, std, (cfg.p, d))
    elif cfg.method == "deep":
        for k in range(model.depth):
            params[f"prompt.{k}"] = rng.normal(0.0, std, (cfg.p, d))
    elif cfg.method == "apt":
        for k in range(model.depth):
            params[f"apt.{k}.p_v"] = rng.normal(0.0, std, (cfg.p, d))
            params[f"apt.{k}.w1"] = rng.normal(0.0, std, (d, cfg.r))
            params[f"apt.{k}.w2"] = np.zeros((cfg.r, d))
            params[f"apt.{k}.s"] = np.zeros((1, 1))
    return params


def prompt_param_count(params: dict[str, np.ndarray]) -> int:
    """Trainable entries excluding the head."""
    return sum(v.size for k, v in params.items() if k != "head")


def _loss(out, split: Split, kind: str):
    if kind == "regression-shift":
        return ops.mean_all(ops.square(out - split.y))
    onehot = np.eye(out.shape[-1])[split.y]
    return ops.scale(ops.pick(ops.log_softmax_rows(out), onehot), -1.0 / split.y.size)


def loss_and_grads(model, task, method, params, split: Split, with_grad: bool = True):
    tape = Tape()
    leaves = {k: tape.leaf(v, name=k, trainable=with_grad) for k, v in params.items()}
    loss = _loss(outputs(model, tape.const(split.x), method, leaves), split, task.kind)
    value = float(loss.value.reshape(-1)[0])
    if not with_grad:
        return value, None
    return value, backward(loss)


def evaluate(model: FrozenModel, task: TaskSpec, method: str, params: dict, split: str = "val") -> float:
    return loss_and_grads(model, task, method, params, getattr(task, split), with_grad=False)[0]


@dataclass
class WindowReport:
    window: int
    means: list[float]
    violations: list[int]

    @property
    def passed(self) -> bool:
        return not self.violations

    def describe(self) -> str:
        if self.passed:
            return f"loss non-increasing across {len(self.means)} windows of {self.window} steps"
        bad = ", ".join(f"window {i} ({self.means[i - 1]:.4g} -> {self.means[i]:.4g})" for i in self.violations)
        return f"loss rose between consecutive {self.window}-step windows: {bad}"


def window_check(losses, window: int = 100) -> WindowReport:
    """Compare mean loss of consecutive non-overlapping windows."""
    losses = np.asarray(losses, dtype=np.float64)
    means = [float(losses[i:i + window].mean()) for i in range(0, len(losses) - window + 1, window)]
    violations = [i for i in range(1, len(means)) if means[i] > means[i - 1]]
    return WindowReport(window, means, violations)


@dataclass
class TrainResult:
    config: TrainConfig
    curve: list[tuple[int, float, float]]
    params: dict[str, np.ndarray]
    init_val_loss: float
    final_val_loss: float
    wall_time: float
    trainable: int
    model_fingerprint: str
    windows: WindowReport = field(repr=False, default=None)

    def curve_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["step", "loss", "val_loss"])
        for step, loss, val in self.curve:
            w.writerow([step, repr(loss), repr(val)])
        return out.getvalue()


def train(model: FrozenModel, task: TaskSpec, cfg: TrainConfig) -> TrainResult:
    """Adapt ``model`` to ``task`` with ``cfg.method``; the model itself never changes."""
    if task.model is not model and task.model.fingerprint() != model.fingerprint():
        raise ValueError("task was built for a different frozen model")
    start = time.perf_counter()
    fingerprint = model.fingerprint()
    params = init_params(model, task, cfg)
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    curve = []
    init_val = evaluate(model, task, cfg.method, params)
    initial = None
    for step in range(cfg.steps):
        loss, grads = loss_and_grads(model, task, cfg.method, params, task.train)
        if initial is None:
            initial = loss
        if not np.isfinite(loss) or loss > DIVERGENCE_FACTOR * initial:
            raise DivergenceError(step, loss, initial)
        curve.append((step, loss, evaluate(model, task, cfg.method, params)))
        for k in params:
            velocity[k] = cfg.momentum * velocity[k] + grads[k]
            lr = cfg.lr if k == "head" else cfg.effective_prompt_lr
            params[k] = params[k] - lr * velocity[k]
    final_val = evaluate(model, task, cfg.method, params)
    final_train = evaluate(model, task, cfg.method, params, "train")
    if not np.isfinite(final_train) or (initial is not None and final_train > DIVERGENCE_FACTOR * initial):
        raise DivergenceError(cfg.steps, final_train, initial)
    curve.append((cfg.steps, final_train, final_val))
    if model.fingerprint() != fingerprint:
        raise RuntimeError("frozen model weights changed during training")
    return TrainResult(
        config=cfg,
        curve=curve,
        params=params,
        init_val_loss=init_val,
        final_val_loss=final_val,
        wall_time=time.perf_counter() - start,
        trainable=prompt_param_count(params),
        model_fingerprint=fingerprint,
        windows=window_check([c[1] for c in curve]),
    )


def save_run(result: TrainResult, task: TaskSpec, run_dir: str) -> None:
    os.makedirs(run_dir, exist_ok=True)
    text = result.config.to_text()
    text += f"task_kind={task.kind}\ntask_seed={task.seed}\n"
    text += f"final_val_loss={result.final_val_loss!r}\ninit_val_loss={result.init_val_loss!r}\n"
    with open(os.path.join(run_dir, "config.txt"), "w") as fh:
        fh.write(text)
    with open(os.path.join(run_dir, "curve.csv"), "w") as fh:
        fh.write(result.curve_csv())
    nk.save_tensors(os.path.join(run_dir, "params.aptm"), result.params)


def read_run_config(run_dir: str) -> dict[str, str]:
    path = os.path.join(run_dir, "config.txt")
    with open(path) as fh:
        return dict(line.rstrip("\n").split("=", 1) for line in fh if "=" in line)


def load_run(run_dir: str) -> tuple[TrainConfig, dict[str, str], dict[str, np.ndarray]]:
    raw = read_run_config(run_dir)
    with open(os.path.join(run_dir, "config.txt")) as fh:
        cfg = TrainConfig.from_text(fh.read())
    params = nk.load_tensors(os.path.join(run_dir, "params.aptm"))
    return cfg, raw, params
