"""Frozen self-attention and exact prompt-extended attention.

Prompt tokens are always prepended: the joint sequence is ``[P; X]``.
Score scaling is ``1/sqrt(d / heads)`` and is folded into the query weight
once per parameter set, so it costs nothing per forward pass.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from . import numkit as nk
from .numkit import ShapeError


def _frozen(m, name: str) -> np.ndarray:
    a = np.array(nk.as_matrix(m, name), dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class AttentionParams:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    heads: int = 1

    def __post_init__(self):
        for name in ("w_q", "w_k", "w_v", "w_o"):
            object.__setattr__(self, name, _frozen(getattr(self, name), name))
        d = self.w_q.shape[0]
        for name in ("w_q", "w_k", "w_v", "w_o"):
            if getattr(self, name).shape != (d, d):
                raise ShapeError(f"{name} must be {d}x{d}, got {getattr(self, name).shape}")
        if self.heads < 1 or d % self.heads:
            raise ValueError(f"d={d} is not divisible by heads={self.heads}")

    @property
    def d(self) -> int:
        return self.w_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.d // self.heads

    @cached_property
    def w_q_scaled(self) -> np.ndarray:
        w = self.w_q / math.sqrt(self.head_dim)
        w.setflags(write=False)
        return w

    @classmethod
    def random(cls, d: int, rng: np.random.Generator, heads: int = 1, std: float | None = None):
        std = 1.0 / math.sqrt(d) if std is None else std
        ws = [rng.normal(0.0, std, (d, d)) for _ in range(4)]
        return cls(*ws, heads=heads)


@dataclass(frozen=True, eq=False)
class FeedForward:
    """Two-layer ReLU MLP ``relu(h W1) W2`` (no biases)."""

    w1: np.ndarray
    w2: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "w1", _frozen(self.w1, "w1"))
        object.__setattr__(self, "w2", _frozen(self.w2, "w2"))
        if self.w1.shape[::-1] != self.w2.shape:
            raise ShapeError(f"ffn shapes {self.w1.shape} and {self.w2.shape} do not chain")

    @classmethod
    def random(cls, d: int, rng: np.random.Generator, mult: int = 4):
        w1 = rng.normal(0.0, 1.0 / math.sqrt(d), (d, mult * d))
        w2 = rng.normal(0.0, 0.5 / math.sqrt(mult * d), (mult * d, d))
        return cls(w1, w2)

    def __call__(self, h: np.ndarray) -> np.ndarray:
        return nk.matmul(nk.relu(nk.matmul(h, self.w1)), self.w2)


@dataclass(frozen=True, eq=False)
class Layer:
    attn: AttentionParams
    ffn: FeedForward


@dataclass
class PromptBank:
    mode: str
    tokens: list[np.ndarray]

    def __post_init__(self):
        if self.mode not in ("shallow", "deep"):
            raise ValueError(f"mode must be 'shallow' or 'deep', got {self.mode!r}")
        self.tokens = [nk.as_matrix(t, "prompt tokens") for t in self.tokens]
        if self.mode == "shallow" and len(self.tokens) != 1:
            raise ValueError(f"shallow bank holds exactly one token matrix, got {len(self.tokens)}")

    @property
    def p(self) -> int:
        return self.tokens[0].shape[0]


@dataclass
class AttentionBlocks:
    """Sub-blocks of the joint softmax map over ``[P; X]`` (single head).

    ``gamma_i``/``gamma_ip`` are partition sums of the input rows, taken
    after subtracting ``shift`` (the joint row maximum) from the scores.
    """

    a_i: np.ndarray
    a_ip: np.ndarray
    a_pi: np.ndarray
    a_p: np.ndarray
    gamma_i: np.ndarray
    gamma_ip: np.ndarray
    shift: np.ndarray
    scores_i: np.ndarray = field(repr=False)
    scores_ip: np.ndarray = field(repr=False)


def _check_cols(params: AttentionParams, **mats) -> None:
    for name, m in mats.items():
        if m.shape[-1] != params.d:
            raise ShapeError(f"{name} has {m.shape[-1]} columns, attention expects d={params.d}")


def _split_heads(m: np.ndarray, heads: int) -> np.ndarray:
    rows, d = m.shape
    return m.reshape(rows, heads, d // heads).transpose(1, 0, 2)


def _merge_heads(m: np.ndarray) -> np.ndarray:
    heads, rows, dh = m.shape
    return m.transpose(1, 0, 2).reshape(rows, heads * dh)


def attend(q: np.ndarray, k: np.ndarray, v: np.ndarray, heads: int) -> np.ndarray:
    """Multi-head attention core on projected (and pre-scaled) q, k, v; no W_o."""
    qh, kh, vh = (_split_heads(m, heads) for m in (q, k, v))
    weights = nk.softmax_rows(nk.matmul(qh, nk.transpose(kh)))
    return _merge_heads(nk.matmul(weights, vh))


def self_attention(x, params: AttentionParams) -> np.ndarray:
    x = nk.as_matrix(x, "x")
    _check_cols(params, x=x)
    q = nk.matmul(x, params.w_q_scaled)
    k = nk.matmul(x, params.w_k)
    v = nk.matmul(x, params.w_v)
    return nk.matmul(attend(q, k, v, params.heads), params.w_o)


def prompt_extended_attention(x, p, params: AttentionParams) -> tuple[np.ndarray, np.ndarray]:
    """Joint attention over ``[P; X]``; returns ``(x_out, p_out)``."""
    x, p = nk.as_matrix(x, "x"), nk.as_matrix(p, "p")
    _check_cols(params, x=x, p=p)
    out = self_attention(nk.concat_rows(p, x), params)
    n_p = p.shape[0]
    return out[n_p:], out[:n_p]


def input_row_attention(x, p, params: AttentionParams, project_prompt_queries: bool = False) -> np.ndarray:
    """Input-row outputs of joint attention without computing prompt-row outputs.

    With ``project_prompt_queries`` the prompt rows also pass through the
    query projection, as in hosts that project the whole sequence at once;
    the result is discarded.
    """
    x, p = nk.as_matrix(x, "x"), nk.as_matrix(p, "p")
    _check_cols(params, x=x, p=p)
    if project_prompt_queries and p.shape[0]:
        nk.matmul(p, params.w_q_scaled)
    q = nk.matmul(x, params.w_q_scaled)
    seq = nk.concat_rows(p, x)
    k = nk.matmul(seq, params.w_k)
    v = nk.matmul(seq, params.w_v)
    return nk.matmul(attend(q, k, v, params.heads), params.w_o)


def decompose_attention(x, p, params: AttentionParams) -> AttentionBlocks:
    if params.heads != 1:
        raise ValueError(
            f"decompose_attention needs a single-head map (heads={params.heads}); "
            "decompose each head separately"
        )
    x, p = nk.as_matrix(x, "x"), nk.as_matrix(p, "p")
    _check_cols(params, x=x, p=p)
    qx, qp = x @ params.w_q_scaled, p @ params.w_q_scaled
    kx, kp = x @ params.w_k, p @ params.w_k
    s_i, s_ip = qx @ kx.T, qx @ kp.T
    joint = np.concatenate([s_i, s_ip], axis=1)
    shift = joint.max(axis=1)
    e_i = np.exp(s_i - shift[:, None])
    e_ip = np.exp(s_ip - shift[:, None])
    gamma_i, gamma_ip = e_i.sum(axis=1), e_ip.sum(axis=1)
    total = gamma_i + gamma_ip
    if p.shape[0]:
        prompt_rows = nk.softmax_rows(np.concatenate([qp @ kx.T, qp @ kp.T], axis=1))
    else:
        prompt_rows = np.zeros((0, x.shape[0]))
    n = x.shape[0]
    return AttentionBlocks(
        a_i=e_i / total[:, None],
        a_ip=e_ip / total[:, None],
        a_pi=prompt_rows[:, :n],
        a_p=prompt_rows[:, n:],
        gamma_i=gamma_i,
        gamma_ip=gamma_ip,
        shift=shift,
        scores_i=s_i,
        scores_ip=s_ip,
    )


def assemble_blocks(blocks: AttentionBlocks, x, p, params: AttentionParams) -> np.ndarray:
    """Input-row output from the blocks: ``(A_I X W_v + A_IP P W_v) W_o``."""
    core = blocks.a_i @ (x @ params.w_v) + blocks.a_ip @ (p @ params.w_v)
    return core @ params.w_o


def partition_weights(blocks: AttentionBlocks) -> tuple[np.ndarray, np.ndarray]:
    total = blocks.gamma_i + blocks.gamma_ip
    return blocks.gamma_i / total, blocks.gamma_ip / total


def assemble_partition(blocks: AttentionBlocks, x, p, params: AttentionParams) -> np.ndarray:
    """Input-row output rebuilt from the two separately normalised softmaxes."""
    w_i, w_ip = partition_weights(blocks)
    core = w_i[:, None] * (nk.softmax_rows(blocks.scores_i) @ (x @ params.w_v))
    if blocks.scores_ip.shape[1]:
        core = core + w_ip[:, None] * (nk.softmax_rows(blocks.scores_ip) @ (p @ params.w_v))
    return core @ params.w_o


def _residual_block(x: np.ndarray, attn_out: np.ndarray, ffn: FeedForward) -> np.ndarray:
    h = nk.add(x, attn_out)
    return nk.add(h, ffn(h))


def deep_prompt_forward(
    x, bank: PromptBank, stack: Sequence[Layer], skip: bool = True, project_prompt_queries: bool = False
) -> np.ndarray:
    """Layerwise (deep) prompting; prompt output rows never reach the FFN.

    ``skip=False`` is the compute-then-discard variant: prompt rows are run
    through attention and W_o, then dropped.
    """
    if bank.mode != "deep":
        raise ValueError("deep_prompt_forward needs a deep prompt bank")
    if len(bank.tokens) != len(stack):
        raise ValueError(f"{len(bank.tokens)} prompt matrices for {len(stack)} attention sites")
    h = nk.as_matrix(x, "x")
    for layer, prompts in zip(stack, bank.tokens):
        if skip:
            attn_out = input_row_attention(h, prompts, layer.attn, project_prompt_queries=project_prompt_queries)
        else:
            attn_out, _ = prompt_extended_attention(h, prompts, layer.attn)
        h = _residual_block(h, attn_out, layer.ffn)
    return h


def shallow_prompt_forward(x, bank: PromptBank, stack: Sequence[Layer]) -> np.ndarray:
    """Prompts join the sequence at layer 0 and travel through every layer."""
    if bank.mode != "shallow":
        raise ValueError("shallow_prompt_forward needs a shallow prompt bank")
    x = nk.as_matrix(x, "x")
    n_p = bank.p
    h = nk.concat_rows(bank.tokens[0], x)
    for layer in stack:
        h = _residual_block(h, self_attention(h, layer.attn), layer.ffn)
    return h[n_p:]


def plain_forward(x, stack: Sequence[Layer]) -> np.ndarray:
    h = nk.as_matrix(x, "x")
    for layer in stack:
        h = _residual_block(h, self_attention(h, layer.attn), layer.ffn)
    return h


DUMP_HEADER = ("layer", "block", "row", "col", "weight")
BLOCK_NAMES = ("II", "IP", "PI", "PP")


def attention_dump_csv(entries) -> str:
    """Serialise ``(layer, block, matrix, row_ids, col_ids)`` entries.

    ``row_ids``/``col_ids`` may be ``None`` for the natural index range.
    """
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(DUMP_HEADER)
    for layer, block, m, row_ids, col_ids in entries:
        if block not in BLOCK_NAMES:
            raise ValueError(f"unknown block {block!r}")
        m = np.asarray(m, dtype=np.float64)
        row_ids = range(m.shape[0]) if row_ids is None else row_ids
        col_ids = range(m.shape[1]) if col_ids is None else col_ids
        for i, ri in enumerate(row_ids):
            for j, cj in enumerate(col_ids):
                w.writerow([layer, block, int(ri), int(cj), repr(float(m[i, j]))])
    return out.getvalue()


def read_attention_dump(text: str) -> list[dict]:
    rows = []
    for r in csv.DictReader(io.StringIO(text)):
        rows.append(
            {
                "layer": int(r["layer"]),
                "block": r["block"],
                "row": int(r["row"]),
                "col": int(r["col"]),
                "weight": float(r["weight"]),
            }
        )
    return rows
