"""
Loss assembly, optimisation and the repeated train/test protocol.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .audit import RunLogger
from .autodiff import Parameter, Tape, Tensor, no_grad, ops
from .config import RunConfig, TrainConfig
from .data import ImageSample
from .errors import CsfiqaError, DataError, NumericError, TrainingAbort
from .metrics import MetricsReport, plcc, srcc
from .model import CsfiqaModel, ModelOutput, batch_patches
from .scl import cls_taps, noise_loss, partition_regions, scale_loss

logger = logging.getLogger(__name__)

MIN_DATASET = 10


def total_loss(y_hat: Tensor, y: Tensor, l_scale: Tensor, l_noise: Tensor, lambda_: float) -> Tensor:
    """Mean absolute error plus ``lambda_`` times both auxiliary losses."""
    return ops.l1_loss(y_hat, y) + ops.mul(ops.add(l_scale, l_noise), lambda_)


@dataclass
class LossBreakdown:
    total: Tensor
    l1: Tensor
    scale: Tensor
    noise: Tensor

    def values(self) -> Dict[str, float]:
        return {
            "loss": self.total.item(),
            "l1": self.l1.item(),
            "scale": self.scale.item(),
            "noise": self.noise.item(),
        }


def region_loss(model: CsfiqaModel, output: ModelOutput) -> Tensor:
    """Noise matching loss summed over every encoder tap."""
    cfg = model.config
    features = output.features
    total: Tensor = Tensor(0.0)
    for tap in range(features.taps):
        small_tokens = model.region_proj(features.patches("small", tap))
        grids = {}
        for branch, tokens in (("small", small_tokens), ("large", features.patches("large", tap))):
            grid = cfg.model.grid(branch)
            grids[branch] = partition_regions(tokens, grid, grid // cfg.scl.region_grid)
        total = total + noise_loss(grids["small"], grids["large"], cfg.scl)
    return total


def compute_losses(
    model: CsfiqaModel,
    patches: Dict[str, np.ndarray],
    labels: np.ndarray,
    beta_pair: float,
) -> LossBreakdown:
    """
    Forward a batch and assemble every loss term.

    Auxiliary terms are skipped (held at 0) when lambda is 0 or their
    switch is off.
    """
    cfg = model.config
    output = model(patches)
    y = Tensor(labels)
    lambda_ = cfg.train.lambda_
    scale: Tensor = Tensor(0.0)
    noise: Tensor = Tensor(0.0)
    if lambda_ > 0 and cfg.scl.use_scl:
        scale = scale_loss(cls_taps(output.features), labels, cfg.scl, beta_pair, project=model.contrast_proj)
    if lambda_ > 0 and cfg.scl.use_nsm:
        noise = region_loss(model, output)
    total = total_loss(output.y_hat, y, scale, noise, lambda_)
    l1 = ops.l1_loss(output.y_hat.detach(), y)
    return LossBreakdown(total=total, l1=l1, scale=scale, noise=noise)


class Adam:
    """Adam with bias correction; parameters without a gradient are left alone."""

    def __init__(
        self,
        params: Sequence[Tuple[str, Parameter]],
        lr: float,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, lr: Optional[float] = None) -> None:
        """
        Apply one update from the accumulated ``.grad`` of every parameter.

        Raises:
            NumericError: If a gradient is not finite, naming the parameter
        """
        for name, p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite gradient in {name}")

        step_lr = self.lr if lr is None else lr
        self.t += 1
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            m = self.beta1 * self.m.get(name, np.zeros_like(g)) + (1.0 - self.beta1) * g
            v = self.beta2 * self.v.get(name, np.zeros_like(g)) + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            m_hat = m / (1.0 - self.beta1**self.t)
            v_hat = v / (1.0 - self.beta2**self.t)
            p.assign(p.data - step_lr * m_hat / (np.sqrt(v_hat) + self.eps))

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()


def step_lr(config: TrainConfig, epoch: int) -> float:
    """Learning rate divided by ``lr_decay_factor`` every ``lr_decay_every`` epochs."""
    return config.lr / config.lr_decay_factor ** (epoch // config.lr_decay_every)


def _batches(order: np.ndarray, size: int) -> List[np.ndarray]:
    return [order[i : i + size] for i in range(0, len(order), size)]


class Trainer:
    """Trains one model instance on one training split."""

    def __init__(
        self,
        config: RunConfig,
        seed: int,
        beta_pair: float,
        run_logger: Optional[RunLogger] = None,
        repeat: int = 0,
    ):
        self.config = config
        self.seed = seed
        self.beta_pair = beta_pair
        self.run_logger = run_logger
        self.repeat = repeat
        self.model = CsfiqaModel(config, seed)
        self.optimizer = Adam(self.model.trainable_parameters(), config.train.lr)

    def train_step(self, samples: Sequence[ImageSample], lr: float) -> LossBreakdown:
        """
        One optimisation step on one batch.

        Raises:
            NumericError: If the loss or a gradient is not finite
        """
        patches = batch_patches(list(samples), self.config.model)
        labels = np.array([s.mos for s in samples], dtype=np.float64)
        self.optimizer.zero_grad()
        with Tape() as tape:
            losses = compute_losses(self.model, patches, labels, self.beta_pair)
        if not math.isfinite(losses.total.item()):
            raise NumericError(f"non-finite loss {losses.total.item()}")
        tape.backward(losses.total)
        self.optimizer.step(lr)
        return losses

    def center_output(self, samples: Sequence[ImageSample]) -> float:
        """Start the decoder at the median training label so the L1 signs are balanced."""
        median = float(np.median([s.mos for s in samples]))
        self.model.decoder.center(median)
        return median

    def fit(self, samples: Sequence[ImageSample]) -> List[Dict[str, float]]:
        """
        Train for the configured epochs; returns the mean losses per epoch.
        """
        self.center_output(samples)
        train = self.config.train
        rng = np.random.default_rng(self.seed)
        history = []
        for epoch in range(train.epochs):
            lr = step_lr(train, epoch)
            sums: Dict[str, float] = {}
            batches = _batches(rng.permutation(len(samples)), train.batch_size)
            for batch in batches:
                values = self.train_step([samples[i] for i in batch], lr).values()
                for key, value in values.items():
                    sums[key] = sums.get(key, 0.0) + value
            means = {key: value / len(batches) for key, value in sums.items()}
            history.append(means)
            logger.info("repeat %d epoch %d lr %.3g loss %.6f", self.repeat, epoch, lr, means["loss"])
            if self.run_logger is not None:
                self.run_logger.log_epoch(self.repeat, epoch, lr, means)
        return history

    def predict(self, samples: Sequence[ImageSample]) -> np.ndarray:
        return predict(self.model, samples, self.config.train.batch_size)


def predict(model: CsfiqaModel, samples: Sequence[ImageSample], batch_size: int = 16) -> np.ndarray:
    """Scores for every sample, without recording a tape."""
    scores = []
    with no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = list(samples[start : start + batch_size])
            scores.append(model(batch_patches(chunk, model.config.model)).y_hat.data.copy())
    return np.concatenate(scores) if scores else np.zeros(0)


def split_indices(n: int, fraction: float, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Shuffled train/test image indices; both sides keep at least two images."""
    order = rng.permutation(n)
    n_train = min(max(int(math.floor(fraction * n)), 2), n - 2)
    return order[:n_train], order[n_train:]


def run_protocol(
    samples: Sequence[ImageSample],
    config: RunConfig,
    run_logger: Optional[RunLogger] = None,
    on_repeat: Optional[Callable[[int, Trainer], None]] = None,
) -> MetricsReport:
    """
    Repeated random train/test splits; report per-repeat and median SRCC/PLCC.

    Repeat ``r`` reseeds with ``seed + r``, splits by image, trains a fresh
    model and scores the held-out images.

    Raises:
        DataError: If there are fewer than ten samples
        TrainingAbort: If a repeat fails, carrying the repeat index
    """
    if len(samples) < MIN_DATASET:
        raise DataError(f"the protocol needs at least {MIN_DATASET} images, got {len(samples)}")
    train_cfg = config.train
    srccs, plccs = [], []
    for repeat in range(train_cfg.repeats):
        seed = train_cfg.seed + repeat
        train_idx, test_idx = split_indices(len(samples), train_cfg.split_fraction, np.random.default_rng(seed))
        train_set = [samples[i] for i in train_idx]
        test_set = [samples[i] for i in test_idx]
        labels = [s.mos for s in train_set]
        beta_pair = config.scl.resolve_beta_pair(min(labels), max(labels))
        try:
            trainer = Trainer(config, seed, beta_pair, run_logger, repeat)
            trainer.fit(train_set)
            preds = trainer.predict(test_set)
            target = np.array([s.mos for s in test_set])
            repeat_srcc, repeat_plcc = srcc(preds, target), plcc(preds, target)
        except CsfiqaError as e:
            raise TrainingAbort(repeat, e) from e

        srccs.append(repeat_srcc)
        plccs.append(repeat_plcc)
        logger.info("repeat %d srcc %.4f plcc %.4f", repeat, repeat_srcc, repeat_plcc)
        if run_logger is not None:
            run_logger.log_repeat(repeat, repeat_srcc, repeat_plcc)
        if on_repeat is not None:
            on_repeat(repeat, trainer)

    report = MetricsReport(srcc=srccs, plcc=plccs)
    if run_logger is not None:
        run_logger.log_protocol(report.median_srcc, report.median_plcc, report.repeats)
    return report


ABLATION_VARIANTS = ("full", "lambda0", "cross_att")
ABLATION_PAIRS = (("full", "lambda0"), ("full", "cross_att"))


@dataclass
class AblationRow:
    variant: str
    seed: int
    median_srcc: float
    median_plcc: float


def ablation_variants(config: RunConfig) -> Dict[str, RunConfig]:
    """The full model, its auxiliary losses switched off, and dense fusion."""
    return {
        "full": config,
        "lambda0": config.with_overrides(**{"lambda": 0.0}),
        "cross_att": config.with_overrides(mode="cross_att"),
    }


def run_ablation(
    samples: Sequence[ImageSample],
    config: RunConfig,
    seeds: int,
    run_logger: Optional[RunLogger] = None,
) -> Tuple[List[AblationRow], Dict[str, int]]:
    """
    Paired protocol runs of every variant for ``seeds`` consecutive seeds.

    Returns:
        Rows per (variant, seed) and, per comparison ``a_vs_b``, the number
        of seeds where variant ``a`` scored a lower median SRCC than ``b``
    """
    variants = ablation_variants(config)
    rows: List[AblationRow] = []
    by_key: Dict[Tuple[str, int], float] = {}
    for offset in range(seeds):
        seed = config.train.seed + offset
        for name in ABLATION_VARIANTS:
            report = run_protocol(samples, variants[name].with_overrides(seed=seed), run_logger)
            rows.append(AblationRow(name, seed, report.median_srcc, report.median_plcc))
            by_key[(name, seed)] = report.median_srcc
            logger.info("ablation %s seed %d srcc %.4f", name, seed, report.median_srcc)

    inversions = {}
    for better, worse in ABLATION_PAIRS:
        count = 0
        for offset in range(seeds):
            seed = config.train.seed + offset
            if by_key[(better, seed)] < by_key[(worse, seed)]:
                count += 1
        inversions[f"{better}_vs_{worse}"] = count
    return rows, inversions
