"""Attention and APT forwards on the autodiff tape.

These mirror :mod:`aptkit.attention` and :mod:`aptkit.apt` but take tape
variables and accept a leading batch axis on the inputs.  Frozen weights
enter the tape as constants, so they never receive gradients.
"""

from __future__ import annotations

from .attention import AttentionParams, FeedForward
from .autodiff import ops
from .autodiff.tape import Var


def _split_heads(t: Var, heads: int) -> Var:
    *lead, rows, d = t.shape
    t = ops.reshape(t, (*lead, rows, heads, d // heads))
    return ops.swapaxes(t, -2, -3)


def _merge_heads(t: Var) -> Var:
    t = ops.swapaxes(t, -2, -3)
    *lead, rows, heads, dh = t.shape
    return ops.reshape(t, (*lead, rows, heads * dh))


def attend(q: Var, k: Var, v: Var, heads: int, probe: list | None = None) -> Var:
    if heads == 1:
        w = ops.softmax_rows(q @ k.T)
        if probe is not None:
            probe.append(w.value)
        return w @ v
    w = ops.softmax_rows(_split_heads(q, heads) @ _split_heads(k, heads).T)
    if probe is not None:
        probe.append(w.value)
    return _merge_heads(w @ _split_heads(v, heads))


def self_attention(x: Var, params: AttentionParams, probe: list | None = None) -> Var:
    q = x @ params.w_q_scaled
    k = x @ params.w_k
    v = x @ params.w_v
    return attend(q, k, v, params.heads, probe) @ params.w_o


def _batched(prompts: Var, like: Var) -> Var:
    if like.value.ndim == prompts.value.ndim:
        return prompts
    return ops.broadcast_to(prompts, (*like.shape[:-2], *prompts.shape))


def input_row_attention(x: Var, prompts: Var, params: AttentionParams, probe: list | None = None) -> Var:
    seq = ops.concat_rows(_batched(prompts, x), x)
    q = x @ params.w_q_scaled
    k = seq @ params.w_k
    v = seq @ params.w_v
    return attend(q, k, v, params.heads, probe) @ params.w_o


def feed_forward(h: Var, ffn: FeedForward) -> Var:
    return ops.relu(h @ ffn.w1) @ ffn.w2


def low_rank_keys(apt: dict[str, Var]) -> Var:
    return apt["p_v"] @ apt["w1"] @ apt["w2"] + apt["p_v"]


def apt_delta(x: Var, apt: dict[str, Var], probe: list | None = None) -> Var:
    keys = low_rank_keys(apt)
    alpha = ops.global_max(keys)
    gated = ops.relu(x @ keys.T)
    if probe is not None:
        probe.append(gated.value * alpha.value[0, 0])
    return (gated @ apt["p_v"]) * alpha


def apt_attention(x: Var, params: AttentionParams, apt: dict[str, Var], probe: list | None = None) -> Var:
    merged = self_attention(x, params, probe) + apt_delta(x, apt, probe)
    return merged * ops.exp(apt["s"])
