"""Prompt/input attention-block dumps for trained (or fresh) runs.

Every method is mapped onto the same four blocks over input (I) and prompt
(P) tokens.  For APT, whose prompt path has no softmax, the IP block holds
the gated scores ``alpha * relu(X K^T)``.
"""

from __future__ import annotations

import os

import numpy as np

from ..attention import attention_dump_csv
from ..autodiff import Tape
from .forward import apt_leaves, hidden
from .model import FrozenModel
from .tasks import TaskSpec

TOP_TOKENS = 15  # per input segment
TOP_PROMPTS = 30


def _head_mean(w: np.ndarray) -> np.ndarray:
    return w if w.ndim == 2 else w.mean(axis=0)


def _prompt_row_weights(h: np.ndarray, prompts: np.ndarray, attn) -> np.ndarray:
    """Softmax weights of prompt query rows over ``[P; X]``, averaged over heads."""
    seq = np.concatenate([prompts, h], axis=0)
    q, k = prompts @ attn.w_q_scaled, seq @ attn.w_k
    dh = attn.head_dim
    out = []
    for i in range(attn.heads):
        s = q[:, i * dh:(i + 1) * dh] @ k[:, i * dh:(i + 1) * dh].T
        e = np.exp(s - s.max(axis=1, keepdims=True))
        out.append(e / e.sum(axis=1, keepdims=True))
    return np.mean(out, axis=0)


def layer_blocks(model: FrozenModel, method: str, params: dict, x: np.ndarray) -> list[dict[str, np.ndarray]]:
    """Per-layer block matrices (II, IP, PI, PP where defined) for one sequence."""
    tape = Tape()
    leaves = {k: tape.const(v) for k, v in params.items()}
    probes: list = []
    hidden(model, tape.const(x), method, leaves, probes)
    out = []
    for k, probe in enumerate(probes):
        h, w = probe[0], _head_mean(probe[1])
        if method == "classifier":
            out.append({"II": w})
        elif method == "deep":
            prompts = params[f"prompt.{k}"]
            p = prompts.shape[0]
            rows = _prompt_row_weights(h, prompts, model.layers[k].attn)
            out.append({"II": w[:, p:], "IP": w[:, :p], "PI": rows[:, p:], "PP": rows[:, :p]})
        elif method == "shallow":
            p = params["prompt"].shape[0]
            out.append({"II": w[p:, p:], "IP": w[p:, :p], "PI": w[:p, p:], "PP": w[:p, :p]})
        else:
            out.append({"II": w, "IP": probe[2]})
    return out


def _top(scores: np.ndarray, ids: np.ndarray, k: int | None) -> np.ndarray:
    if k is None or k >= len(ids):
        return ids
    order = np.argsort(-scores[ids], kind="stable")[:k]
    return np.sort(ids[order])


def select_tokens(blocks: dict, segments: tuple[int, int], top_tokens: int | None, top_prompts: int | None):
    """Most active input tokens per segment and most active prompts."""
    if "IP" in blocks:
        token_score = blocks["IP"].sum(axis=1)
    else:
        token_score = blocks["II"].sum(axis=0)
    bounds = np.cumsum([0, *segments])
    tokens = np.concatenate(
        [_top(token_score, np.arange(bounds[i], bounds[i + 1]), top_tokens) for i in range(len(segments))]
    )
    prompts = None
    if "IP" in blocks:
        ip = blocks["IP"]
        prompts = _top(ip.sum(axis=0), np.arange(ip.shape[1]), top_prompts)
    return tokens, prompts


def attention_diffusion_dump(
    model: FrozenModel,
    task: TaskSpec,
    method: str,
    params: dict,
    layer: int | None = None,
    sample: int = 0,
    top_tokens: int | None = TOP_TOKENS,
    top_prompts: int | None = TOP_PROMPTS,
) -> dict[int, str]:
    """CSV text per layer (all layers when ``layer`` is None) for one val sequence."""
    x = task.val.x[sample]
    per_layer = layer_blocks(model, method, params, x)
    layers = range(len(per_layer)) if layer is None else [layer]
    out = {}
    for k in layers:
        blocks = per_layer[k]
        tok, pr = select_tokens(blocks, task.segments, top_tokens, top_prompts)
        entries = [(k, "II", blocks["II"][np.ix_(tok, tok)], tok, tok)]
        if pr is not None:
            entries.append((k, "IP", blocks["IP"][np.ix_(tok, pr)], tok, pr))
        if "PI" in blocks:
            entries.append((k, "PI", blocks["PI"][np.ix_(pr, tok)], pr, tok))
            entries.append((k, "PP", blocks["PP"][np.ix_(pr, pr)], pr, pr))
        out[k] = attention_dump_csv(entries)
    return out


def write_dumps(run_dir: str, dumps: dict[int, str]) -> list[str]:
    paths = []
    for k, text in sorted(dumps.items()):
        path = os.path.join(run_dir, f"dump_layer{k}.csv")
        with open(path, "w") as fh:
            fh.write(text)
        paths.append(path)
    return paths


def ip_mass(model: FrozenModel, method: str, params: dict, x: np.ndarray, layer: int = 0) -> float:
    """Total IP-block weight at ``layer`` for one sequence."""
    blocks = layer_blocks(model, method, params, x)[layer]
    return float(np.abs(blocks["IP"]).sum()) if "IP" in blocks else 0.0
