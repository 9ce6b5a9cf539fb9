"""Two-scale transformer quality model."""

from .decoder import Alignment, DecoderBlock, QualityDecoder
from .encoder import (
    EncoderBranch,
    MultiScaleEncoder,
    PatchEmbedding,
    ScaleFeatures,
    assemble_patches,
    batch_patches,
    extract_patches,
    patchify,
)
from .layers import Block, LayerNorm, Linear, Mlp, Module, MultiHeadAttention
from .network import DIRECTIONS, CsfiqaModel, ModelOutput
from .sfa import (
    AfsMasks,
    AttentionRecord,
    CrossScaleAttention,
    DenseFusion,
    FusionAttention,
    InformationConcentrator,
    SelectiveFocus,
    SelectiveFusion,
    build_fusion,
    cross_att,
    mask_keep_count,
    select_att,
    topk_keep,
)

__all__ = [
    "AfsMasks",
    "Alignment",
    "AttentionRecord",
    "Block",
    "CrossScaleAttention",
    "CsfiqaModel",
    "DIRECTIONS",
    "DecoderBlock",
    "DenseFusion",
    "EncoderBranch",
    "FusionAttention",
    "InformationConcentrator",
    "LayerNorm",
    "Linear",
    "Mlp",
    "ModelOutput",
    "Module",
    "MultiHeadAttention",
    "MultiScaleEncoder",
    "PatchEmbedding",
    "ScaleFeatures",
    "SelectiveFocus",
    "SelectiveFusion",
    "assemble_patches",
    "batch_patches",
    "build_fusion",
    "cross_att",
    "extract_patches",
    "mask_keep_count",
    "patchify",
    "select_att",
    "topk_keep",
]
