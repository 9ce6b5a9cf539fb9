"""
Scale contrastive learning and noise sample matching.

Pairs in a minibatch are positives when their labels differ by at most
``beta_pair`` and negatives otherwise. The contrastive loss is InfoNCE
over L2-normalised cls tokens at every encoder tap. The noise matching
loss penalises dissimilar small/large region pairs of the same image.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .autodiff import Tensor, ops
from .config import BRANCHES, SclConfig
from .errors import ConfigError, DimensionError
from .model.encoder import ScaleFeatures

logger = logging.getLogger(__name__)

RECIPROCAL_FLOOR = 1e-3

LabelsLike = Union[Tensor, np.ndarray, Sequence[float]]
Projector = Callable[[Tensor], Tensor]


def _labels(labels: LabelsLike) -> np.ndarray:
    if isinstance(labels, Tensor):
        return labels.data.reshape(-1)
    return np.asarray(labels, dtype=np.float64).reshape(-1)


@dataclass(frozen=True)
class PairSets:
    anchor: int
    positives: Tuple[int, ...]
    negatives: Tuple[int, ...]


def classify_pairs(labels: LabelsLike, i: int, beta_pair: float) -> PairSets:
    """Split the other batch members of anchor ``i`` by label distance."""
    y = _labels(labels)
    distance = np.abs(y - y[i])
    others = [j for j in range(len(y)) if j != i]
    return PairSets(
        anchor=i,
        positives=tuple(j for j in others if distance[j] <= beta_pair),
        negatives=tuple(j for j in others if distance[j] > beta_pair),
    )


def pair_masks(labels: LabelsLike, beta_pair: float) -> Tuple[np.ndarray, np.ndarray]:
    """(positive, negative) boolean matrices; row i holds anchor i's sets."""
    y = _labels(labels)
    distance = np.abs(y[:, None] - y[None, :])
    off_diagonal = ~np.eye(len(y), dtype=bool)
    return (distance <= beta_pair) & off_diagonal, (distance > beta_pair) & off_diagonal


def info_nce(anchor: Tensor, positives: Sequence[Tensor], negatives: Sequence[Tensor], tau: float) -> Tensor:
    """
    Mean over positives p of -log(e^{s(a,p)/tau} / (e^{s(a,p)/tau} + sum_n e^{s(a,n)/tau})).

    ``s`` is the dot product of L2-normalised vectors.

    Raises:
        ValueError: If ``positives`` is empty
    """
    if not positives:
        raise ValueError("info_nce needs at least one positive")
    a = ops.l2_normalize(anchor)

    def logit(other: Tensor) -> Tensor:
        return ops.div(ops.sum(ops.mul(a, ops.l2_normalize(other))), tau)

    negative_sum: Optional[Tensor] = None
    for n in negatives:
        term = ops.exp(logit(n))
        negative_sum = term if negative_sum is None else negative_sum + term

    total: Optional[Tensor] = None
    for p in positives:
        s = logit(p)
        denominator = ops.exp(s) if negative_sum is None else ops.exp(s) + negative_sum
        term = ops.log(denominator) - s
        total = term if total is None else total + term
    assert total is not None
    return ops.div(total, float(len(positives)))


def contrast(
    anchors: Tensor,
    candidates: Tensor,
    positive: np.ndarray,
    negative: np.ndarray,
    tau: float,
) -> Tuple[Tensor, int, int]:
    """
    InfoNCE averaged over anchors that have at least one positive.

    Args:
        anchors: (B, d) features
        candidates: (B, d) features the anchors are compared with
        positive: (B, B) mask of positive candidates per anchor
        negative: (B, B) mask of negative candidates per anchor
        tau: Temperature

    Returns:
        (loss, anchors used, anchors skipped)
    """
    if anchors.shape != candidates.shape:
        raise DimensionError(f"contrast: anchors {anchors.shape} vs candidates {candidates.shape}")
    counts = positive.sum(axis=1)
    valid = counts > 0
    used = int(valid.sum())
    skipped = len(counts) - used
    if used == 0:
        return Tensor(0.0), 0, skipped

    a = ops.l2_normalize(anchors, axis=-1)
    c = ops.l2_normalize(candidates, axis=-1)
    logits = ops.div(a @ ops.transpose(c, (1, 0)), tau)
    # A per-row constant shift cancels inside each log-ratio.
    shifted = ops.sub(logits, np.max(logits.data, axis=1, keepdims=True))
    e = ops.exp(shifted)
    negative_sum = ops.sum(ops.mul(e, negative.astype(np.float64)), axis=1, keepdims=True)
    terms = ops.log(e + negative_sum) - shifted
    per_anchor = ops.sum(ops.mul(terms, positive.astype(np.float64)), axis=1)
    per_anchor = ops.div(per_anchor, np.maximum(counts, 1).astype(np.float64))
    loss = ops.div(ops.sum(ops.mul(per_anchor, valid.astype(np.float64))), float(used))
    return loss, used, skipped


def cls_taps(features: ScaleFeatures) -> List[Dict[str, Tensor]]:
    """Per-tap cls tokens (B, dim_a) of both branches."""
    return [{branch: features.cls(branch, tap) for branch in BRANCHES} for tap in range(features.taps)]


def scale_loss(
    taps: Sequence[Dict[str, Tensor]],
    labels: LabelsLike,
    config: SclConfig,
    beta_pair: float,
    project: Optional[Projector] = None,
) -> Tensor:
    """
    Contrastive loss summed over taps and branches.

    With ``scope`` ``intra`` each branch is contrasted with itself. With
    ``inter`` the anchors of one branch are contrasted with the other
    branch's tokens (small tokens lifted by ``project``), and each image's
    other-scale token counts as a positive. ``both`` adds the two.

    Raises:
        ConfigError: If an inter-scale scope is requested without ``project``
    """
    positive, negative = pair_masks(labels, beta_pair)
    cross_positive = positive | np.eye(len(positive), dtype=bool)
    total: Tensor = Tensor(0.0)
    skipped = 0

    for tap in taps:
        if config.scope in ("intra", "both"):
            for branch in BRANCHES:
                loss, _, missed = contrast(tap[branch], tap[branch], positive, negative, config.tau)
                total = total + loss
                skipped += missed
        if config.scope in ("inter", "both"):
            if project is None:
                raise ConfigError("inter-scale contrast needs a small-to-large projection")
            small, large = project(tap["small"]), tap["large"]
            for anchors, candidates in ((small, large), (large, small)):
                loss, _, missed = contrast(anchors, candidates, cross_positive, negative, config.tau)
                total = total + loss
                skipped += missed

    if skipped:
        logger.debug("scale_loss skipped %d anchors with no positive", skipped)
    return total


@dataclass
class RegionGrid:
    """Pooled region vectors (B, rows*cols, d), row-major over the region grid."""

    regions: Tensor
    rows: int
    cols: int

    @property
    def count(self) -> int:
        return self.rows * self.cols


def partition_regions(patch_tokens: Tensor, grid: int, window: int) -> RegionGrid:
    """
    Mean-pool non-overlapping ``window x window`` blocks of a ``grid x grid``
    patch layout.

    Args:
        patch_tokens: (n, d) or (B, n, d) with n == grid * grid
        grid: Patches per side
        window: Patches per region side

    Raises:
        ConfigError: If ``grid`` is not divisible by ``window``
    """
    if window < 1 or grid % window:
        raise ConfigError(f"patch grid {grid}x{grid} is not divisible by window {window}x{window}")
    tokens = patch_tokens
    unbatched = tokens.ndim == 2
    if unbatched:
        tokens = ops.reshape(tokens, (1,) + tokens.shape)
    batch, count, dim = tokens.shape
    if count != grid * grid:
        raise DimensionError(f"expected {grid * grid} patch tokens, got {count}")

    side = grid // window
    blocks = ops.reshape(tokens, (batch, side, window, side, window, dim))
    blocks = ops.transpose(blocks, (0, 1, 3, 2, 4, 5))
    blocks = ops.reshape(blocks, (batch, side * side, window * window, dim))
    return RegionGrid(regions=ops.mean(blocks, axis=2), rows=side, cols=side)


def region_similarity(small: RegionGrid, large: RegionGrid, eps: float = 1e-8) -> Tensor:
    """Cosine similarity of every (small, large) region pair: (B, M, K)."""
    fine, coarse = small.regions, large.regions
    if fine.ndim == 2:
        fine = ops.reshape(fine, (1,) + fine.shape)
    if coarse.ndim == 2:
        coarse = ops.reshape(coarse, (1,) + coarse.shape)
    if fine.shape[0] != coarse.shape[0] or fine.shape[-1] != coarse.shape[-1]:
        raise DimensionError(f"region_similarity: small {fine.shape} vs large {coarse.shape}")
    zs = ops.l2_normalize(fine, axis=-1, eps=eps)
    zl = ops.l2_normalize(coarse, axis=-1, eps=eps)
    return zs @ ops.transpose(zl, (0, 2, 1))


def noise_loss(small: RegionGrid, large: RegionGrid, config: SclConfig) -> Tensor:
    """
    Per-image sum of ``exp(-Sim)`` (or ``1/max(Sim, 1e-3)``) over region
    pairs, averaged over the batch. ``least_similar`` keeps only each
    image's least similar pair.
    """
    sim = region_similarity(small, large)
    if config.noise_form == "exp_inverse":
        penalty = ops.exp(ops.neg(sim))
    else:
        penalty = ops.div(1.0, ops.maximum(sim, RECIPROCAL_FLOOR))

    if config.noise_mode == "least_similar":
        batch = sim.shape[0]
        flat = sim.data.reshape(batch, -1)
        pick = np.zeros_like(flat)
        pick[np.arange(batch), np.argmin(flat, axis=1)] = 1.0
        penalty = ops.mul(penalty, pick.reshape(sim.shape))

    return ops.mean(ops.sum(penalty, axis=(1, 2)))
