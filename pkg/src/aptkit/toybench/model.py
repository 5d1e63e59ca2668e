"""The frozen "pretrained" network that every adaptation method starts from."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from ..attention import AttentionParams, FeedForward, Layer


@dataclass(frozen=True, eq=False)
class FrozenModel:
    """Residual attention + ReLU FFN blocks followed by a linear head.

    There is no LayerNorm; weight scales keep activations O(1) at depth 2-4.
    The head here is the pretrained one; adaptation trains a copy of it.
    """

    layers: tuple[Layer, ...]
    head: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        head = np.array(self.head, dtype=np.float64, copy=True)
        head.setflags(write=False)
        object.__setattr__(self, "head", head)
        if not self.layers:
            raise ValueError("model needs at least one layer")
        if head.shape[0] != self.d:
            raise ValueError(f"head has {head.shape[0]} rows, model width is {self.d}")

    @property
    def d(self) -> int:
        return self.layers[0].attn.d

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def out_dim(self) -> int:
        return self.head.shape[1]

    @property
    def heads(self) -> int:
        return self.layers[0].attn.heads

    @classmethod
    def random(cls, d: int, depth: int, out_dim: int, rng: np.random.Generator, heads: int = 1):
        if not 2 <= depth <= 4 or not 32 <= d <= 64:
            raise ValueError(f"toy models use depth 2-4 and d 32-64, got depth={depth}, d={d}")
        layers = []
        for _ in range(depth):
            attn = AttentionParams.random(d, rng, heads=heads)
            layers.append(Layer(attn, FeedForward.random(d, rng)))
        head = rng.normal(0.0, 1.0 / math.sqrt(d), (d, out_dim))
        return cls(tuple(layers), head)

    def perturbed(self, rank: int, magnitude: float, rng: np.random.Generator) -> FrozenModel:
        """Copy with ``W_v += magnitude * U V^T / d`` (rank ``rank``) at every layer."""
        d = self.d
        layers = []
        for layer in self.layers:
            a = layer.attn
            u = rng.normal(size=(d, rank))
            v = rng.normal(size=(d, rank))
            w_v = a.w_v + magnitude * (u @ v.T) / d
            layers.append(Layer(AttentionParams(a.w_q, a.w_k, w_v, a.w_o, heads=a.heads), layer.ffn))
        return FrozenModel(tuple(layers), self.head)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for layer in self.layers:
            for w in (layer.attn.w_q, layer.attn.w_k, layer.attn.w_v, layer.attn.w_o, layer.ffn.w1, layer.ffn.w2):
                h.update(np.ascontiguousarray(w).tobytes())
        h.update(np.ascontiguousarray(self.head).tobytes())
        return h.hexdigest()
