"""Approximated prompt tuning: the diffusion chain from exact to APT form.

``p_v`` holds prompts already projected into value space.  The low-rank
key transform is ``K = p_v (w1 w2) + p_v`` and the APT diffusion is
``alpha * relu(X K^T) p_v`` with ``alpha = max(K)``, scaled together with
the frozen attention output by ``exp(s)``.  None of the APT-form scores
are divided by ``sqrt(d)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .attention import AttentionParams, decompose_attention, partition_weights, self_attention
from .numkit import ShapeError


class SingularTransformError(ValueError):
    pass


@dataclass
class AptParams:
    p_v: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    s: float = 0.0

    def __post_init__(self):
        self.p_v = nk.as_matrix(self.p_v, "p_v")
        self.w1 = nk.as_matrix(self.w1, "w1")
        self.w2 = nk.as_matrix(self.w2, "w2")
        self.s = float(self.s)
        p, d = self.p_v.shape
        if p < 1:
            raise ValueError("APT needs at least one prompt token")
        if self.w1.shape[0] != d or self.w2.shape[1] != d or self.w1.shape[1] != self.w2.shape[0]:
            raise ShapeError(
                f"low-rank factors {self.w1.shape} x {self.w2.shape} do not fit d={d}"
            )
        if self.r > d:
            raise ValueError(f"rank r={self.r} exceeds d={d}")

    @property
    def p(self) -> int:
        return self.p_v.shape[0]

    @property
    def d(self) -> int:
        return self.p_v.shape[1]

    @property
    def r(self) -> int:
        return self.w1.shape[1]

    @property
    def n_params(self) -> int:
        return self.p_v.size + self.w1.size + self.w2.size + 1

    def copy(self) -> AptParams:
        return AptParams(self.p_v.copy(), self.w1.copy(), self.w2.copy(), self.s)

    def to_tensors(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {
            prefix + "p_v": self.p_v,
            prefix + "w1": self.w1,
            prefix + "w2": self.w2,
            prefix + "s": np.array([[self.s]]),
        }

    @classmethod
    def from_tensors(cls, tensors: dict, prefix: str = "") -> AptParams:
        return cls(
            tensors[prefix + "p_v"],
            tensors[prefix + "w1"],
            tensors[prefix + "w2"],
            float(tensors[prefix + "s"][0, 0]),
        )


def init_apt(p: int, d: int, r: int, rng: np.random.Generator, std: float = 0.02) -> AptParams:
    """Prompts and ``w1`` drawn from N(0, std^2); ``w2`` and ``s`` start at zero."""
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    if not 1 <= r <= d:
        raise ValueError(f"rank must satisfy 1 <= r <= d, got r={r}, d={d}")
    return AptParams(
        p_v=rng.normal(0.0, std, (p, d)),
        w1=rng.normal(0.0, std, (d, r)),
        w2=np.zeros((r, d)),
        s=0.0,
    )


def _single_head(params: AttentionParams) -> None:
    if params.heads != 1:
        raise ValueError(f"exact diffusion terms are single-head, got heads={params.heads}")


def exact_diffusion(x, p, params: AttentionParams) -> np.ndarray:
    """Prompt-to-input diffusion of joint attention, in value space (before W_o)."""
    _single_head(params)
    x, p = nk.as_matrix(x, "x"), nk.as_matrix(p, "p")
    if p.shape[0] == 0:
        return np.zeros((x.shape[0], params.d))
    blocks = decompose_attention(x, p, params)
    _, w_ip = partition_weights(blocks)
    return w_ip[:, None] * (nk.softmax_rows(blocks.scores_ip) @ (p @ params.w_v))


def aggregate_softmax(x, p, params: AttentionParams) -> np.ndarray:
    """Unweighted, unscaled prompt aggregation ``softmax(X Wq Wk^T P^T) P Wv``."""
    _single_head(params)
    x, p = nk.as_matrix(x, "x"), nk.as_matrix(p, "p")
    if p.shape[1] != params.d or x.shape[1] != params.d:
        raise ShapeError(f"x {x.shape} / p {p.shape} do not match d={params.d}")
    if p.shape[0] == 0:
        return np.zeros((x.shape[0], params.d))
    scores = x @ params.w_q @ params.w_k.T @ p.T
    return nk.softmax_rows(scores) @ (p @ params.w_v)


def vk_transform_gap(p, params: AttentionParams) -> np.ndarray:
    p = nk.as_matrix(p, "p")
    return p @ (params.w_k @ params.w_q.T - params.w_v)


def low_rank_keys(apt: AptParams) -> np.ndarray:
    return nk.add(nk.matmul(nk.matmul(apt.p_v, apt.w1), apt.w2), apt.p_v)


def apt_alpha(apt: AptParams, per_row: bool = False):
    keys = low_rank_keys(apt)
    if per_row:
        return nk.row_max(keys)
    return nk.global_max(keys)


def apt_scores(x, apt: AptParams, per_row: bool = False) -> np.ndarray:
    """The gated prompt-weight matrix ``alpha * relu(X K^T)`` (n x p)."""
    x = nk.as_matrix(x, "x")
    if x.shape[1] != apt.d:
        raise ShapeError(f"x has {x.shape[1]} columns, APT expects d={apt.d}")
    keys = low_rank_keys(apt)
    gated = nk.relu(nk.matmul(x, nk.transpose(keys)))
    if per_row:
        return gated * nk.row_max(keys)[None, :]
    return gated * nk.global_max(keys)


def apt_delta(x, apt: AptParams, per_row: bool = False) -> np.ndarray:
    x = nk.as_matrix(x, "x")
    if x.shape[1] != apt.d:
        raise ShapeError(f"x has {x.shape[1]} columns, APT expects d={apt.d}")
    keys = low_rank_keys(apt)
    gated = nk.relu(nk.matmul(x, nk.transpose(keys)))
    if per_row:
        return nk.matmul(nk.mul(gated, nk.row_max(keys)[None, :]), apt.p_v)
    return nk.scale(nk.matmul(gated, apt.p_v), nk.global_max(keys))


def apt_attention(x, params: AttentionParams, apt: AptParams, per_row: bool = False) -> np.ndarray:
    if apt.d != params.d:
        raise ShapeError(f"APT dimension {apt.d} does not match attention d={params.d}")
    merged = nk.add(self_attention(x, params), apt_delta(x, apt, per_row=per_row))
    return nk.scale(merged, nk.exp(np.array([[apt.s]]))[0, 0])


@dataclass
class RepresentationReport:
    rank: int
    max_abs_error: float
    factor_residual: float
    condition_number: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_abs_error < self.tol


def key_transform(params: AttentionParams, max_cond: float = 1e12) -> tuple[np.ndarray, float]:
    """``W_v^{-1} (W_k W_q^T - W_v)``: maps value-space prompts to keys minus themselves."""
    cond = float(np.linalg.cond(params.w_v))
    if not np.isfinite(cond) or cond > max_cond:
        raise SingularTransformError(f"W_v is singular or ill-conditioned (cond={cond:.3e})")
    target = params.w_k @ params.w_q.T - params.w_v
    return np.linalg.solve(params.w_v, target), cond


def factorize(m: np.ndarray, r: int) -> tuple[np.ndarray, np.ndarray]:
    """Best rank-r factors ``(w1, w2)`` of ``m`` in Frobenius norm."""
    u, sv, vt = np.linalg.svd(m)
    return u[:, :r] * sv[:r], vt[:r]


def exact_representation_check(
    x, p, params: AttentionParams, tol: float = 1e-8, r: int | None = None
) -> RepresentationReport:
    """Rebuild the softmax aggregation from value-space prompts and a rank-r transform."""
    x, p = nk.as_matrix(x, "x"), nk.as_matrix(p, "p")
    r = params.d if r is None else r
    transform, cond = key_transform(params)
    w1, w2 = factorize(transform, r)
    p_v = p @ params.w_v
    keys = p_v @ w1 @ w2 + p_v
    approx = nk.softmax_rows(x @ keys.T) @ p_v
    exact = aggregate_softmax(x, p, params)
    return RepresentationReport(
        rank=r,
        max_abs_error=float(np.max(np.abs(approx - exact))),
        factor_residual=float(np.linalg.norm(transform - w1 @ w2)),
        condition_number=cond,
        tol=tol,
    )

