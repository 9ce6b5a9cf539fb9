"""Two-scale patch embedding and transformer encoder branches."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Mapping, Union

import numpy as np

from ..autodiff import Parameter, Tensor, ops
from ..config import BRANCHES, ModelConfig
from ..data import ImageSample
from ..errors import ConfigError, DimensionError
from .layers import Block, Linear, Module, trunc_normal


def extract_patches(pixels: np.ndarray, patch: int) -> np.ndarray:
    """
    Split an (H, W, C) grid into non-overlapping row-major patches.

    Returns:
        Array of shape (H/patch * W/patch, patch*patch*C), each patch
        flattened channel-last
    """
    height, width, channels = pixels.shape
    if height % patch or width % patch:
        raise ConfigError(f"image {height}x{width} is not divisible by patch {patch}")
    rows, cols = height // patch, width // patch
    grid = pixels.reshape(rows, patch, cols, patch, channels).transpose(0, 2, 1, 3, 4)
    return grid.reshape(rows * cols, patch * patch * channels)


def assemble_patches(patches: np.ndarray, rows: int, cols: int, patch: int, channels: int) -> np.ndarray:
    """Inverse of ``extract_patches``."""
    grid = patches.reshape(rows, cols, patch, patch, channels).transpose(0, 2, 1, 3, 4)
    return grid.reshape(rows * patch, cols * patch, channels)


def patchify(image: ImageSample, branch: str, config: ModelConfig) -> np.ndarray:
    """
    Patches of one image at one branch's resolution.

    Raises:
        ConfigError: If the stored view does not match the configured size
    """
    pixels = image.view(branch)
    expected = (config.img_size(branch), config.img_size(branch), config.channels)
    if pixels.shape != expected:
        raise ConfigError(f"{image.id}: {branch} view is {pixels.shape}, expected {expected}")
    return extract_patches(pixels, config.patch(branch))


def batch_patches(images: List[ImageSample], config: ModelConfig) -> Dict[str, np.ndarray]:
    """Stack per-branch patches into (B, n_a, patch_dim_a) arrays."""
    return {branch: np.stack([patchify(img, branch, config) for img in images]) for branch in BRANCHES}


class PatchEmbedding(Module):
    """Linear patch projection, learnable cls token and positional embedding."""

    def __init__(self, config: ModelConfig, branch: str, rng: np.random.Generator):
        dim, std = config.dim(branch), config.init_std
        self.num_patches = config.num_patches(branch)
        self.proj = Linear(config.patch_dim(branch), dim, rng, std)
        self.cls = Parameter(trunc_normal(rng, (1, 1, dim), std))
        self.pos = Parameter(trunc_normal(rng, (1, 1 + self.num_patches, dim), std))
        self.use_pos = config.use_pos_embed

    def __call__(self, patches: Union[np.ndarray, Tensor]) -> Tensor:
        patches = patches if isinstance(patches, Tensor) else Tensor(patches)
        batch, count, _ = patches.shape
        if count != self.num_patches:
            raise DimensionError(f"expected {self.num_patches} patches, got {count}")
        cls_rows = ops.add(np.zeros((batch, 1, self.cls.shape[-1])), self.cls)
        tokens = ops.concat([cls_rows, self.proj(patches)], axis=1)
        return tokens + self.pos if self.use_pos else tokens


class EncoderBranch(Module):
    def __init__(self, config: ModelConfig, branch: str, rng: np.random.Generator):
        self.embedding = PatchEmbedding(config, branch, rng)
        self.blocks = [
            Block(config.dim(branch), config.heads, config.mlp_ratio, rng, config.init_std)
            for _ in range(config.depth(branch))
        ]

    def encode(self, tokens: Tensor) -> List[Tensor]:
        """Output of every block, in order."""
        outputs = []
        for block in self.blocks:
            tokens = block(tokens)
            outputs.append(tokens)
        return outputs


@dataclass
class ScaleFeatures:
    """
    Per-layer token matrices (B, 1+n_a, dim_a) of both branches.

    Taps run over the deeper branch; the shallower branch contributes its
    last available layer at the remaining taps.
    """

    small: List[Tensor]
    large: List[Tensor]

    @property
    def taps(self) -> int:
        return max(len(self.small), len(self.large))

    def at(self, branch: str, tap: int) -> Tensor:
        layers = self.small if branch == "small" else self.large
        return layers[min(tap, len(layers) - 1)]

    def cls(self, branch: str, tap: int) -> Tensor:
        return self.at(branch, tap)[:, 0, :]

    def patches(self, branch: str, tap: int) -> Tensor:
        return self.at(branch, tap)[:, 1:, :]

    def final(self, branch: str) -> Tensor:
        return self.at(branch, self.taps - 1)


class MultiScaleEncoder(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.small = EncoderBranch(config, "small", rng)
        self.large = EncoderBranch(config, "large", rng)

    def branch(self, name: str) -> EncoderBranch:
        return self.small if name == "small" else self.large

    def embed(self, patches: Mapping[str, Union[np.ndarray, Tensor]]) -> Dict[str, Tensor]:
        return {name: self.branch(name).embedding(patches[name]) for name in BRANCHES}

    def encode(self, tokens: Mapping[str, Tensor]) -> ScaleFeatures:
        return ScaleFeatures(
            small=self.small.encode(tokens["small"]),
            large=self.large.encode(tokens["large"]),
        )

    def __call__(self, patches: Mapping[str, Union[np.ndarray, Tensor]]) -> ScaleFeatures:
        return self.encode(self.embed(patches))
