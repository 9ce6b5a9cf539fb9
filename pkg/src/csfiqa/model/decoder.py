"""Alignment of the two fused cls vectors and the quality decoder."""

from __future__ import annotations

from typing import List

import numpy as np

from ..autodiff import Parameter, Tensor, ops
from ..config import ModelConfig
from .layers import LayerNorm, Linear, Mlp, Module, MultiHeadAttention, trunc_normal


class Alignment(Module):
    """fuse([f_large; proj(f_small)]): both branches mapped to the large width."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        std = config.init_std
        self.proj_small = Linear(config.dim_small, config.dim_large, rng, std)
        self.fuse = Linear(2 * config.dim_large, config.dim_large, rng, std)

    def __call__(self, f_small: Tensor, f_large: Tensor) -> Tensor:
        return self.fuse(ops.concat([f_large, self.proj_small(f_small)], axis=-1))


class DecoderBlock(Module):
    """Query cross-attends to the memory tokens, then a residual MLP."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng: np.random.Generator, std: float):
        self.norm_q = LayerNorm(dim)
        self.norm_kv = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng, std)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, dim * mlp_ratio, rng, std)

    def __call__(self, query: Tensor, memory: Tensor) -> Tensor:
        query = query + self.attn(self.norm_q(query), self.norm_kv(memory))
        return query + self.mlp(self.norm2(query))


class QualityDecoder(Module):
    """
    Learnable query token decoded against the fused feature, followed by a
    two-layer head to one unbounded score per image.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        dim, std = config.dim_large, config.init_std
        self.query = Parameter(trunc_normal(rng, (1, 1, dim), std))
        self.blocks: List[DecoderBlock] = [
            DecoderBlock(dim, config.heads, config.mlp_ratio, rng, std) for _ in range(config.decoder_depth)
        ]
        self.head_hidden = Linear(dim, dim, rng, std)
        self.head_out = Linear(dim, 1, rng, std)

    def center(self, score: float) -> None:
        """Move the output bias so an untrained head predicts ``score``."""
        self.head_out.bias.assign([score])

    def __call__(self, fused: Tensor) -> Tensor:
        """
        Args:
            fused: Aligned feature (B, dim_large)

        Returns:
            Predicted scores (B,)
        """
        batch = fused.shape[0]
        memory = ops.reshape(fused, (batch, 1, fused.shape[-1]))
        query = ops.add(np.zeros((batch, 1, self.query.shape[-1])), self.query)
        for block in self.blocks:
            query = block(query, memory)
        hidden = ops.gelu(self.head_hidden(query[:, 0, :]))
        return ops.reshape(self.head_out(hidden), (batch,))
