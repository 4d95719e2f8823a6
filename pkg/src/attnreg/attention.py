"""Siamese feature augmentation: stacks of self- and cross-attention blocks.

Every block is a residual update out = bn(x + MLP(x || message)) where the
message comes from multi-head softmax attention over a fully-connected graph
(within one cloud for self-attention, across clouds for cross-attention).
Weights are shared between the two branches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .errors import ConfigError, SizeError
from .layers import BatchNorm, Linear, MLP


@dataclass(frozen=True)
class AttentionConfig:
    stacks: int = 9
    heads: int = 2
    d: int = 128
    message_hidden: int | None = None  # defaults to 2*d

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ConfigError(f"d={self.d} not divisible by heads={self.heads}")
        if self.stacks < 1:
            raise ConfigError("need at least one attention stack")

    @property
    def head_dim(self) -> int:
        return self.d // self.heads

    @property
    def hidden(self) -> int:
        return self.message_hidden or 2 * self.d


class AttentionLayer:
    """One residual attention block (used for both self- and cross-attention)."""

    def __init__(self, store: ParamStore, config: AttentionConfig,
                 rng: np.random.Generator, name: str):
        d = config.d
        self.config = config
        self.query = Linear(store, f"{name}.query", d, d, rng)
        self.key = Linear(store, f"{name}.key", d, d, rng)
        self.value = Linear(store, f"{name}.value", d, d, rng)
        self.out = Linear(store, f"{name}.out", d, d, rng)
        # final update layer starts at zero so the stack begins near identity
        self.update = MLP(store, f"{name}.update", 2 * d, (config.hidden, d),
                          rng, zero_init_last=True)
        self.norm = BatchNorm(store, f"{name}.norm", d)

    def mha(self, queries_from: Tensor, kv_from: Tensor) -> Tensor:
        """Multi-head scaled dot-product attention messages for each query row."""
        if kv_from.shape[0] == 0:
            raise SizeError("attention needs at least one key/value point")
        cfg = self.config
        q = self.query(queries_from)
        k = self.key(kv_from)
        v = self.value(kv_from)
        scale = 1.0 / np.sqrt(cfg.head_dim)
        head_messages = []
        for h in range(cfg.heads):
            start = h * cfg.head_dim
            qh = ad.narrow(q, 1, start, cfg.head_dim)
            kh = ad.narrow(k, 1, start, cfg.head_dim)
            vh = ad.narrow(v, 1, start, cfg.head_dim)
            scores = ad.mul(ad.matmul(qh, ad.transpose(kh)), scale)
            attn = ad.softmax(scores, axis=1)
            head_messages.append(ad.matmul(attn, vh))
        return self.out(ad.concat(head_messages, axis=1))

    def __call__(self, x: Tensor, source: Tensor, mode: str = "eval") -> Tensor:
        message = self.mha(x, source)
        update = self.update(ad.concat([x, message], axis=1))
        return self.norm(ad.add(x, update), mode)

    def pair(self, x_a: Tensor, source_a: Tensor, x_b: Tensor, source_b: Tensor,
             mode: str = "eval") -> tuple[Tensor, Tensor]:
        """Apply the block to both branches with pair-pooled batch statistics."""
        m_a = self.mha(x_a, source_a)
        m_b = self.mha(x_b, source_b)
        out_a = ad.add(x_a, self.update(ad.concat([x_a, m_a], axis=1)))
        out_b = ad.add(x_b, self.update(ad.concat([x_b, m_b], axis=1)))
        joint = self.norm(ad.concat([out_a, out_b], axis=0), mode)
        size_a = out_a.shape[0]
        return (ad.narrow(joint, 0, 0, size_a),
                ad.narrow(joint, 0, size_a, out_b.shape[0]))


class FeatureAugmenter:
    """Alternating self-/cross-attention stacks applied to both feature sets."""

    def __init__(self, store: ParamStore, config: AttentionConfig,
                 rng: np.random.Generator, name: str = "augment"):
        self.config = config
        self.stacks = [
            (AttentionLayer(store, config, rng, f"{name}.{i}.self"),
             AttentionLayer(store, config, rng, f"{name}.{i}.cross"))
            for i in range(config.stacks)
        ]

    def __call__(self, f_s: Tensor, f_r: Tensor, mode: str = "eval"):
        for self_layer, cross_layer in self.stacks:
            f_s, f_r = self_layer.pair(f_s, f_s, f_r, f_r, mode)
            # both cross updates read the same pair state (siamese symmetry)
            f_s, f_r = cross_layer.pair(f_s, f_r, f_r, f_s, mode)
        return f_s, f_r
