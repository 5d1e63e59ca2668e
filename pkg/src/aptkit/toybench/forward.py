"""Method-specific forwards of a :class:`FrozenModel` on the autodiff tape."""

from __future__ import annotations

import numpy as np

from .. import traced
from ..autodiff import Tape, Var, ops
from .model import FrozenModel

METHODS = ("classifier", "shallow", "deep", "apt")


def apt_leaves(leaves: dict[str, Var], k: int) -> dict[str, Var]:
    return {key: leaves[f"apt.{k}.{key}"] for key in ("p_v", "w1", "w2", "s")}


def hidden(
    model: FrozenModel, x: Var, method: str, leaves: dict[str, Var], probes: list | None = None
) -> Var:
    """Final hidden states of the input rows under ``method``.

    ``probes`` (if given) receives one list per layer: the layer input, the
    attention weights and, for APT, the gated prompt scores.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")
    h = x
    n_p = 0
    if method == "shallow":
        n_p = leaves["prompt"].shape[-2]
        h = ops.concat_rows(traced._batched(leaves["prompt"], x), x)
    for k, layer in enumerate(model.layers):
        probe = None if probes is None else [h.value]
        if method == "deep":
            attn = traced.input_row_attention(h, leaves[f"prompt.{k}"], layer.attn, probe)
        elif method == "apt":
            attn = traced.apt_attention(h, layer.attn, apt_leaves(leaves, k), probe)
        else:
            attn = traced.self_attention(h, layer.attn, probe)
        h = h + attn
        h = h + traced.feed_forward(h, layer.ffn)
        if probes is not None:
            probes.append(probe)
    if n_p:
        h = ops.slice_rows(h, n_p)
    return h


def outputs(model: FrozenModel, x: Var, method: str, leaves: dict[str, Var], probes: list | None = None) -> Var:
    return hidden(model, x, method, leaves, probes) @ leaves["head"]


def frozen_features(model: FrozenModel, x: np.ndarray) -> np.ndarray:
    """Final hidden states of a prompt-free pass (no tape gradients)."""
    tape = Tape()
    return hidden(model, tape.const(x), "classifier", {}).value
