"""Parameter containers and transformer building blocks."""

from __future__ import annotations

import math
from typing import Callable, Dict, Iterator, List, Optional, Tuple

import numpy as np
from scipy.stats import truncnorm

from ..autodiff import Parameter, Tensor, ops
from ..errors import ConfigError, DimensionError

AttendFn = Callable[[Tensor, Tensor, Tensor], Tensor]


def trunc_normal(rng: np.random.Generator, shape: Tuple[int, ...], std: float) -> np.ndarray:
    """Normal(0, std) truncated at two standard deviations."""
    return truncnorm.rvs(-2.0, 2.0, loc=0.0, scale=std, size=shape, random_state=rng)


class Module:
    """Base class: parameters and sub-modules are discovered from attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{key}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> List[Tuple[str, Parameter]]:
        return [(name, p) for name, p in self.named_parameters() if not p.frozen]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ConfigError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            p.assign(state[name])


class Linear(Module):
    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        rng: np.random.Generator,
        std: float = 0.02,
        frozen: bool = False,
    ):
        self.weight = Parameter(trunc_normal(rng, (in_dim, out_dim), std), frozen=frozen)
        self.bias = Parameter(np.zeros(out_dim), frozen=frozen)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5, frozen: bool = False):
        self.gamma = Parameter(np.ones(dim), frozen=frozen)
        self.beta = Parameter(np.zeros(dim), frozen=frozen)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layernorm(x, self.gamma, self.beta, self.eps)


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(B, T, D) -> (B, h, T, D/h)."""
    batch, tokens, dim = x.shape
    return ops.transpose(ops.reshape(x, (batch, tokens, heads, dim // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    """(B, h, T, d) -> (B, T, h*d)."""
    batch, heads, tokens, head_dim = x.shape
    return ops.reshape(ops.transpose(x, (0, 2, 1, 3)), (batch, tokens, heads * head_dim))


def attention_scores(q: Tensor, k: Tensor) -> Tensor:
    """QK^T / sqrt(d_head) for head-split tensors."""
    return ops.mul(q @ ops.transpose(k, (0, 1, 3, 2)), 1.0 / math.sqrt(q.shape[-1]))


def dense_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    return ops.softmax(attention_scores(q, k), axis=-1) @ v


class MultiHeadAttention(Module):
    """Multi-head attention with separate query and key/value inputs."""

    def __init__(
        self,
        dim: int,
        heads: int,
        rng: np.random.Generator,
        std: float = 0.02,
        frozen: bool = False,
    ):
        if dim % heads:
            raise ConfigError(f"dim={dim} is not divisible by heads={heads}")
        self.heads = heads
        self.q = Linear(dim, dim, rng, std, frozen)
        self.k = Linear(dim, dim, rng, std, frozen)
        self.v = Linear(dim, dim, rng, std, frozen)
        self.out = Linear(dim, dim, rng, std, frozen)

    def __call__(self, x_q: Tensor, x_kv: Optional[Tensor] = None, attend: Optional[AttendFn] = None) -> Tensor:
        x_kv = x_q if x_kv is None else x_kv
        if x_q.shape[-1] != x_kv.shape[-1]:
            raise DimensionError(f"attention: query width {x_q.shape} vs key width {x_kv.shape}")
        q = split_heads(self.q(x_q), self.heads)
        k = split_heads(self.k(x_kv), self.heads)
        v = split_heads(self.v(x_kv), self.heads)
        mixed = (attend or dense_attention)(q, k, v)
        return self.out(merge_heads(mixed))


class Mlp(Module):
    def __init__(
        self,
        dim: int,
        hidden: int,
        rng: np.random.Generator,
        std: float = 0.02,
        frozen: bool = False,
    ):
        self.fc1 = Linear(dim, hidden, rng, std, frozen)
        self.fc2 = Linear(hidden, dim, rng, std, frozen)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))


class Block(Module):
    """Pre-norm transformer block: x + MSA(LN(x)), then x + MLP(LN(x))."""

    def __init__(
        self,
        dim: int,
        heads: int,
        mlp_ratio: int,
        rng: np.random.Generator,
        std: float = 0.02,
        frozen: bool = False,
    ):
        self.norm1 = LayerNorm(dim, frozen=frozen)
        self.attn = MultiHeadAttention(dim, heads, rng, std, frozen)
        self.norm2 = LayerNorm(dim, frozen=frozen)
        self.mlp = Mlp(dim, dim * mlp_ratio, rng, std, frozen)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))
