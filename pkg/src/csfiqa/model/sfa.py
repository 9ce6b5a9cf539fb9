"""
Selective focus attention: cross-scale attention whose cls query keeps only
its top-k keys under several learnable masks, followed by an information
concentrator (a learnable linear layer feeding a frozen amplifier block).
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union

import numpy as np

from ..autodiff import Parameter, Tensor, no_grad, ops
from ..autodiff.tensor import active_tape
from ..config import ModelConfig, SfaConfig
from ..errors import ConfigError
from .layers import Block, LayerNorm, Linear, Module, attention_scores, merge_heads, split_heads


def mask_keep_count(fraction: float, n_keys: int) -> int:
    """Survivors per row: ``max(1, round(fraction * n_keys))``, halves rounded up."""
    return max(1, int(math.floor(fraction * n_keys + 0.5)))


def topk_keep(scores: np.ndarray, k: int) -> np.ndarray:
    """
    Boolean mask of the ``k`` largest entries of each row (last axis).

    Ties at the k-th score go to the lower index.
    """
    order = np.argsort(-scores, axis=-1, kind="stable")
    keep = np.zeros(scores.shape, dtype=bool)
    np.put_along_axis(keep, order[..., :k], True, axis=-1)
    return keep


@dataclass
class AttentionRecord:
    """Attention weights of the most recent forward pass, for inspection."""

    fractions: List[float] = field(default_factory=list)
    counts: List[int] = field(default_factory=list)
    mix: List[float] = field(default_factory=list)
    keeps: List[np.ndarray] = field(default_factory=list)
    weights: List[np.ndarray] = field(default_factory=list)


def cross_att(q: Tensor, k: Tensor, v: Tensor, record: Optional[AttentionRecord] = None) -> Tensor:
    """Dense attention softmax(QK^T / sqrt(d))V over head-split tensors."""
    attn = ops.softmax(attention_scores(q, k), axis=-1)
    if record is not None:
        record.fractions.append(1.0)
        record.counts.append(k.shape[-2])
        record.mix.append(1.0)
        record.keeps.append(np.ones(attn.shape, dtype=bool))
        record.weights.append(attn.data)
    return attn @ v


def _count_surrogate(fraction: Tensor, scores: np.ndarray, v: np.ndarray, count: int, current: np.ndarray) -> Tensor:
    """
    Zero-valued term whose gradient in ``fraction`` is the change from
    keeping one more key, scaled by the number of keys.
    """
    n_keys = scores.shape[-1]
    wider = ops.masked_softmax(Tensor(scores), topk_keep(scores, count + 1), axis=-1).data @ v
    rate = ops.mul(fraction, float(n_keys))
    return ops.mul(wider - current, ops.sub(rate, rate.detach()))


def select_att(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    fractions: Union[Sequence[float], Tensor],
    mix: Tensor,
    record: Optional[AttentionRecord] = None,
) -> Tensor:
    """
    Top-k filtered attention averaged over several masks.

    Selection is hard in the forward pass. When ``fractions`` is a tensor
    it receives a straight-through gradient: the output is treated as
    linear in the survivor count between ``k`` and ``k + 1``.

    Args:
        q, k, v: Head-split tensors (B, h, T, d)
        fractions: Kept fraction of keys per mask
        mix: Per-mask weights summing to 1
        record: Collects survivors and weights when given

    Returns:
        ``sum_m mix[m] * masked_softmax(M_m(QK^T / sqrt(d))) V``
    """
    scores = attention_scores(q, k)
    n_keys = scores.shape[-1]
    values = fractions.data if isinstance(fractions, Tensor) else np.asarray(fractions, dtype=np.float64)
    total: Optional[Tensor] = None
    for m, fraction in enumerate(values.tolist()):
        count = mask_keep_count(fraction, n_keys)
        keep = topk_keep(scores.data, count)
        attn = ops.masked_softmax(scores, keep, axis=-1)
        attended = attn @ v
        if isinstance(fractions, Tensor) and count < n_keys and active_tape() is not None:
            surrogate = _count_surrogate(fractions[m], scores.data, v.data, count, attended.data)
            attended = attended + surrogate
        term = ops.mul(attended, mix[m])
        total = term if total is None else total + term
        if record is not None:
            record.fractions.append(float(fraction))
            record.counts.append(count)
            record.mix.append(float(mix.data[m]))
            record.keeps.append(keep)
            record.weights.append(attn.data)
    assert total is not None
    return total


class AfsMasks(Module):
    """
    Learnable top-k masks: fractions squashed into [alpha_k, beta_k] and
    softmax mixing weights.

    Fractions start evenly spread inside the range. Top-k selection has no
    true gradient in the fraction; ``select_att`` supplies a
    straight-through one.
    """

    def __init__(self, config: SfaConfig):
        n = config.num_masks
        self.alpha = config.alpha_k
        self.beta = config.beta_k
        positions = (np.arange(n) + 0.5) / n
        self.fraction_logits = Parameter(np.log(positions / (1.0 - positions)))
        self.mix_logits = Parameter(np.zeros(n))

    def fraction_tensor(self) -> Tensor:
        return ops.sigmoid(self.fraction_logits) * (self.beta - self.alpha) + self.alpha

    def fractions(self) -> List[float]:
        with no_grad():
            return [float(f) for f in self.fraction_tensor().data]

    def mix(self) -> Tensor:
        return ops.softmax(self.mix_logits, axis=-1)


class FusionAttention(Module, ABC):
    """Strategy that turns head-split Q, K, V into the attended values."""

    def __init__(self) -> None:
        self.capture = False
        self.last_record: Optional[AttentionRecord] = None

    def _record(self) -> Optional[AttentionRecord]:
        self.last_record = AttentionRecord() if self.capture else None
        return self.last_record

    @abstractmethod
    def attend(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        """Attend from ``q`` over ``k``/``v``."""


class DenseFusion(FusionAttention):
    def attend(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        return cross_att(q, k, v, self._record())


class SelectiveFusion(FusionAttention):
    def __init__(self, config: SfaConfig):
        super().__init__()
        self.masks = AfsMasks(config)

    def attend(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        return select_att(q, k, v, self.masks.fraction_tensor(), self.masks.mix(), self._record())


def build_fusion(config: SfaConfig) -> FusionAttention:
    """Get the configured fusion strategy."""
    if config.mode == "select_att":
        return SelectiveFusion(config)
    elif config.mode == "cross_att":
        return DenseFusion()
    else:
        raise ConfigError(f"Unknown attention mode: {config.mode}")


class CrossScaleAttention(Module):
    """Attention from the cls row of x' = [cls; patches] over all of x'."""

    def __init__(
        self,
        dim: int,
        heads: int,
        fusion: FusionAttention,
        rng: np.random.Generator,
        std: float = 0.02,
    ):
        if dim % heads:
            raise ConfigError(f"dim={dim} is not divisible by heads={heads}")
        self.heads = heads
        self.q = Linear(dim, dim, rng, std)
        self.k = Linear(dim, dim, rng, std)
        self.v = Linear(dim, dim, rng, std)
        self.out = Linear(dim, dim, rng, std)
        self.fusion = fusion

    def __call__(self, x_prime: Tensor) -> Tensor:
        q = split_heads(self.q(x_prime[:, :1, :]), self.heads)
        k = split_heads(self.k(x_prime), self.heads)
        v = split_heads(self.v(x_prime), self.heads)
        return self.out(merge_heads(self.fusion.attend(q, k, v)))


class InformationConcentrator(Module):
    """x + Frozen(Linear(x)); the frozen block is seeded and never trained."""

    def __init__(
        self,
        dim: int,
        heads: int,
        mlp_ratio: int,
        rng: np.random.Generator,
        frozen_rng: np.random.Generator,
        std: float = 0.02,
    ):
        self.linear = Linear(dim, dim, rng, std)
        self.amplifier = Block(dim, heads, mlp_ratio, frozen_rng, 0.02, frozen=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.amplifier(self.linear(x))


class SelectiveFocus(Module):
    """
    One fusion direction: the source branch's cls token attends over the
    other branch's patch tokens and is updated residually.
    """

    def __init__(
        self,
        source_dim: int,
        target_dim: int,
        model: ModelConfig,
        sfa: SfaConfig,
        rng: np.random.Generator,
        frozen_rng: np.random.Generator,
    ):
        std = model.init_std
        self.to_target = Linear(source_dim, target_dim, rng, std)
        self.norm = LayerNorm(target_dim)
        self.attention = CrossScaleAttention(target_dim, model.heads, build_fusion(sfa), rng, std)
        self.icm: Optional[InformationConcentrator] = None
        if sfa.use_icm:
            self.icm = InformationConcentrator(target_dim, model.heads, model.mlp_ratio, rng, frozen_rng, std)
        self.to_source = Linear(target_dim, source_dim, rng, std)

    @property
    def fusion(self) -> FusionAttention:
        return self.attention.fusion

    def __call__(self, cls: Tensor, patches: Tensor) -> Tensor:
        """
        Args:
            cls: Source cls tokens (B, 1, source_dim)
            patches: Target patch tokens (B, n, target_dim)

        Returns:
            Updated source cls tokens (B, 1, source_dim)
        """
        x_prime = self.norm(ops.concat([self.to_target(cls), patches], axis=1))
        focused = self.attention(x_prime)
        if self.icm is not None:
            focused = self.icm(focused)
        return cls + self.to_source(focused)
