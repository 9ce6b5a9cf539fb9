"""The assembled two-scale quality model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Mapping, Union

import numpy as np

from ..autodiff import Parameter, Tensor
from ..config import RunConfig
from .decoder import Alignment, QualityDecoder
from .encoder import MultiScaleEncoder, ScaleFeatures
from .layers import Linear, Module
from .sfa import FusionAttention, SelectiveFocus

# Fusion directions, named after the branch whose cls token is the query.
DIRECTIONS = ("small_to_large", "large_to_small")


@dataclass
class ModelOutput:
    y_hat: Tensor
    features: ScaleFeatures


class CsfiqaModel(Module):
    """
    Encoder branches, one selective focus module per direction, alignment
    and decoder. ``contrast_proj`` and ``region_proj`` lift small-branch
    features to the large width for the inter-scale contrastive term and
    the noise matching loss.
    """

    def __init__(self, config: RunConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        model, sfa = config.model, config.sfa
        rng = np.random.default_rng(seed)
        frozen_rng = np.random.default_rng(sfa.icm_frozen_seed)

        self.encoder = MultiScaleEncoder(model, rng)
        self.sfa_small = SelectiveFocus(model.dim_small, model.dim_large, model, sfa, rng, frozen_rng)
        self.sfa_large = SelectiveFocus(model.dim_large, model.dim_small, model, sfa, rng, frozen_rng)
        self.align = Alignment(model, rng)
        self.decoder = QualityDecoder(model, rng)
        self.contrast_proj = Linear(model.dim_small, model.dim_large, rng, model.init_std)
        self.region_proj = Linear(model.dim_small, model.dim_large, rng, model.init_std)

    def __call__(self, patches: Mapping[str, Union[np.ndarray, Tensor]]) -> ModelOutput:
        """
        Args:
            patches: Per-branch patch batches (B, n_a, patch_dim_a)

        Returns:
            Scores (B,) and the per-layer features of both branches
        """
        features = self.encoder(patches)
        small, large = features.final("small"), features.final("large")
        f_small = self.sfa_small(small[:, :1, :], large[:, 1:, :])
        f_large = self.sfa_large(large[:, :1, :], small[:, 1:, :])
        fused = self.align(f_small[:, 0, :], f_large[:, 0, :])
        return ModelOutput(y_hat=self.decoder(fused), features=features)

    def fusions(self) -> Dict[str, FusionAttention]:
        return {"small_to_large": self.sfa_small.fusion, "large_to_small": self.sfa_large.fusion}

    def frozen_parameters(self) -> List[Parameter]:
        return [p for p in self.parameters() if p.frozen]
