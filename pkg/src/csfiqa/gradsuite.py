"""
Finite-difference gradient suite.

Every differentiable op is checked on small random tensors, then each
model stage and the full training loss on a toy-sized model.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Parameter, Tensor, gradient_errors, ops
from .config import BRANCHES, ModelConfig, RunConfig, SclConfig, TrainConfig
from .model import CsfiqaModel
from .model.layers import attention_scores, split_heads
from .model.sfa import cross_att, select_att
from .scl import cls_taps, noise_loss, partition_regions, scale_loss
from .train import compute_losses, region_loss

logger = logging.getLogger(__name__)

TOLERANCE = 1e-4
STEP = 1e-5
# Key biases shift a whole softmax row, so their true gradient is exactly
# zero and central differences see only round-off. Mask fractions carry a
# straight-through gradient that has no finite-difference counterpart.
UNCHECKED_SUFFIXES = (".k.bias", ".fraction_logits")
TOY_LABELS = (0.1, 0.12, 0.5, 0.52)
TOY_BETA_PAIR = 0.05


@dataclass
class CheckResult:
    name: str
    error: float
    worst_param: str
    seconds: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.error <= self.tolerance


def default_config() -> RunConfig:
    """Toy model sized for the suite."""
    return RunConfig(model=ModelConfig.gradcheck_toy(), train=TrainConfig(batch_size=len(TOY_LABELS)))


def _run(
    name: str,
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    *,
    floor: float = 1e-8,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> CheckResult:
    started = time.perf_counter()
    errors = gradient_errors(f, params, STEP, floor=floor, max_entries=max_entries, rng=np.random.default_rng(seed))
    worst = max(errors, key=lambda key: errors[key]) if errors else ""
    result = CheckResult(name, errors.get(worst, 0.0), worst, time.perf_counter() - started)
    logger.debug("%s: max relative error %.3g (%s)", name, result.error, worst)
    return result


def _param(rng: np.random.Generator, *shape: int, low: float = -1.0, high: float = 1.0, name: str = "x") -> Parameter:
    return Parameter(rng.uniform(low, high, size=shape), name=name)


def op_checks(seed: int = 0) -> List[CheckResult]:
    """Each primitive on random tensors with at most five entries per axis."""
    rng = np.random.default_rng(seed)
    a, b = _param(rng, 3, 4, name="a"), _param(rng, 3, 4, name="b")
    m1, m2 = _param(rng, 3, 3, name="m1"), _param(rng, 3, 3, name="m2")
    pos = _param(rng, 2, 5, low=0.5, high=2.0, name="pos")
    row = _param(rng, 4, name="row")
    gamma, beta = _param(rng, 4, name="gamma"), _param(rng, 4, name="beta")
    u, v = _param(rng, 5, name="u"), _param(rng, 5, name="v")
    target = rng.uniform(2.0, 3.0, size=(3, 4))
    keep = rng.random((3, 4)) < 0.6
    keep[:, 0] = True
    weights = rng.normal(size=(3, 4))

    def weighted(t: Tensor) -> Tensor:
        return ops.sum(ops.mul(t, weights))

    return [
        _run("matmul", lambda: ops.sum(m1 @ m2), [m1, m2]),
        _run("add", lambda: weighted(a + row), [a, row]),
        _run("sub", lambda: weighted(a - b), [a, b]),
        _run("mul", lambda: weighted(a * b), [a, b]),
        _run("div", lambda: ops.sum(ops.div(a, pos[0, :4])), [a, pos]),
        _run("exp_log", lambda: ops.sum(ops.log(pos) + ops.exp(pos)), [pos]),
        _run("gelu", lambda: weighted(ops.gelu(a)), [a]),
        _run("sigmoid", lambda: weighted(ops.sigmoid(a)), [a]),
        _run("softmax", lambda: weighted(ops.softmax(a, axis=-1)), [a]),
        _run("masked_softmax", lambda: weighted(ops.masked_softmax(a, keep, axis=-1)), [a]),
        _run("layernorm", lambda: weighted(ops.layernorm(a, gamma, beta)), [a, gamma, beta]),
        _run("concat_slice", lambda: weighted(ops.concat([a[:, :2], b[:, 2:]], axis=1)), [a, b]),
        _run("reshape_transpose", lambda: ops.sum(ops.mul(ops.transpose(ops.reshape(a, (4, 3))), weights)), [a]),
        _run("mean", lambda: ops.sum(ops.mul(ops.mean(a, axis=0), row)), [a, row]),
        _run("cosine_sim", lambda: ops.cosine_sim(u, v), [u, v]),
        _run("cosine_sim_eps", lambda: ops.cosine_sim(u, v, eps=1e-8), [u, v]),
        _run("l1_loss", lambda: ops.l1_loss(a, target), [a]),
    ]


def _toy_patches(config: ModelConfig, rng: np.random.Generator, batch: int) -> Dict[str, np.ndarray]:
    return {
        branch: rng.uniform(0.0, 1.0, size=(batch, config.num_patches(branch), config.patch_dim(branch)))
        for branch in BRANCHES
    }


def checked_parameters(model: CsfiqaModel) -> List[Tuple[str, Parameter]]:
    """Trainable parameters whose analytic gradient central differences can verify."""
    return [(name, p) for name, p in model.trainable_parameters() if not name.endswith(UNCHECKED_SUFFIXES)]


def model_checks(config: RunConfig, seed: int = 0, max_entries: Optional[int] = None) -> List[CheckResult]:
    """
    Every stage of the model and the full loss, over every checked
    parameter entry (or a sample of ``max_entries`` per tensor).
    """
    rng = np.random.default_rng(seed)
    labels = np.array(TOY_LABELS)
    model = CsfiqaModel(config, seed)
    patches = _toy_patches(config.model, rng, len(labels))
    named = checked_parameters(model)
    for name, p in named:
        p.name = name
    params = [p for _, p in named]

    def stage(prefix: str) -> List[Parameter]:
        return [p for name, p in named if name.startswith(prefix)]

    def encoded() -> Tensor:
        features = model.encoder(patches)
        return ops.add(ops.mean(features.final("small")), ops.mean(ops.mul(features.final("large"), 2.0)))

    def fused_direction(direction: str) -> Callable[[], Tensor]:
        def f() -> Tensor:
            features = model.encoder(patches)
            small, large = features.final("small"), features.final("large")
            if direction == "small":
                out = model.sfa_small(small[:, :1, :], large[:, 1:, :])
            else:
                out = model.sfa_large(large[:, :1, :], small[:, 1:, :])
            return ops.sum(ops.gelu(out))

        return f

    align_small = Parameter(rng.normal(size=(len(labels), config.model.dim_small)), name="f_small")
    align_large = Parameter(rng.normal(size=(len(labels), config.model.dim_large)), name="f_large")

    def aligned() -> Tensor:
        return ops.sum(ops.gelu(model.align(align_small, align_large)))

    def decoded() -> Tensor:
        return ops.sum(ops.mul(model.decoder(align_large), labels))

    def contrastive() -> Tensor:
        return scale_loss(cls_taps(model.encoder(patches)), labels, config.scl, TOY_BETA_PAIR, model.contrast_proj)

    both_scopes = config.scl.model_copy(update={"scope": "both"})

    def contrastive_both() -> Tensor:
        return scale_loss(cls_taps(model.encoder(patches)), labels, both_scopes, TOY_BETA_PAIR, model.contrast_proj)

    def matching() -> Tensor:
        return region_loss(model, model(patches))

    def full() -> Tensor:
        return compute_losses(model, patches, labels, TOY_BETA_PAIR).total

    kwargs = {"max_entries": max_entries, "seed": seed}
    return [
        _run("encode", encoded, stage("encoder."), **kwargs),
        _run("sfa_small_to_large", fused_direction("small"), stage("encoder.") + stage("sfa_small."), **kwargs),
        _run("sfa_large_to_small", fused_direction("large"), stage("sfa_large."), **kwargs),
        _run("align", aligned, stage("align.") + [align_small, align_large], **kwargs),
        _run("decode", decoded, stage("decoder.") + [align_large], **kwargs),
        _run("scale_loss", contrastive, stage("encoder."), **kwargs),
        _run("scale_loss_inter", contrastive_both, stage("encoder.") + stage("contrast_proj."), **kwargs),
        _run("noise_loss", matching, stage("encoder.") + stage("region_proj."), **kwargs),
        _run("total_loss", full, params, **kwargs),
    ]


def attention_checks(seed: int = 0) -> List[CheckResult]:
    """Dense and top-k attention against their query, key and value inputs."""
    rng = np.random.default_rng(seed)
    x = _param(rng, 2, 5, 4, name="x")
    mix = Parameter(np.log(np.array([0.2, 0.3, 0.5])), name="mix_logits")

    def heads() -> tuple[Tensor, Tensor, Tensor]:
        q = split_heads(ops.mul(x[:, :1, :], 1.5), 2)
        k = split_heads(ops.gelu(x), 2)
        v = split_heads(ops.sigmoid(x), 2)
        return q, k, v

    def dense() -> Tensor:
        return ops.sum(ops.gelu(cross_att(*heads())))

    def selective() -> Tensor:
        q, k, v = heads()
        return ops.sum(ops.gelu(select_att(q, k, v, [0.4, 0.6, 1.0], ops.softmax(mix))))

    def scores() -> Tensor:
        q, k, _ = heads()
        return ops.sum(ops.sigmoid(attention_scores(q, k)))

    return [
        _run("attention_scores", scores, [x]),
        _run("cross_att", dense, [x]),
        _run("select_att", selective, [x, mix]),
    ]


def loss_checks(config: RunConfig, seed: int = 0) -> List[CheckResult]:
    """Region pooling and the noise matching forms on raw tokens."""
    rng = np.random.default_rng(seed)
    small = _param(rng, 2, 16, 6, name="small_tokens")
    large = _param(rng, 2, 4, 6, name="large_tokens")
    reciprocal = config.scl.model_copy(update={"noise_form": "reciprocal"})
    least = config.scl.model_copy(update={"noise_mode": "least_similar"})

    def matched(cfg: SclConfig) -> Callable[[], Tensor]:
        return lambda: noise_loss(partition_regions(small, 4, 2), partition_regions(large, 2, 1), cfg)

    return [
        _run("noise_exp_inverse", matched(config.scl), [small, large]),
        _run("noise_reciprocal", matched(reciprocal), [small, large]),
        _run("noise_least_similar", matched(least), [small, large]),
    ]


def run_suite(config: Optional[RunConfig] = None, seed: int = 0, max_entries: Optional[int] = None) -> List[CheckResult]:
    """Run every check; the caller decides what a failure means."""
    config = config or default_config()
    return op_checks(seed) + attention_checks(seed) + loss_checks(config, seed) + model_checks(config, seed, max_entries)
