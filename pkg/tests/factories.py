"""Small builders shared by the test modules."""

from typing import List

import numpy as np

from csfiqa.config import BRANCHES, ModelConfig, RunConfig, TrainConfig
from csfiqa.data import ImageSample


def toy_run_config(**overrides: object) -> RunConfig:
    """Gradient-check sized model, one epoch, one repeat."""
    config = RunConfig(
        model=ModelConfig.gradcheck_toy(),
        train=TrainConfig(epochs=1, batch_size=4, repeats=1),
    )
    return config.with_overrides(**overrides) if overrides else config


def make_samples(config: ModelConfig, n: int, seed: int = 0) -> List[ImageSample]:
    """Random images whose label follows their mean brightness."""
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        level = rng.uniform(0.1, 0.9)
        views = {}
        for branch in BRANCHES:
            size = config.img_size(branch)
            noise = rng.normal(0.0, 0.05, size=(size, size, config.channels))
            views[branch] = np.clip(level + noise, 0.0, 1.0)
        samples.append(ImageSample(id=f"img{i}", pixels=views["small"], mos=float(level), views=views))
    return samples
