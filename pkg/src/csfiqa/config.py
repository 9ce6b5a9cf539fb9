"""Configuration management for CSFIQA.

Hyperparameters live in four pydantic sections (model, train, scl, sfa)
read from a flat ``key=value`` file. Process settings (log location and
level) come from the environment and an optional ``.env`` file.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Dict, Literal, Mapping, Optional, Tuple, Type

from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .errors import ConfigError

BRANCHES: Tuple[str, str] = ("small", "large")


class ModelConfig(BaseModel):
    """Two-branch encoder, fusion and decoder sizes."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    img_size_small: int = Field(default=48, gt=0)
    img_size_large: int = Field(default=28, gt=0)
    patch_small: int = Field(default=12, gt=0)
    patch_large: int = Field(default=14, gt=0)
    dim_small: int = Field(default=24, gt=0)
    dim_large: int = Field(default=48, gt=0)
    depth_small: int = Field(default=1, ge=1)
    depth_large: int = Field(default=4, ge=1)
    heads: int = Field(default=2, ge=1)
    decoder_depth: int = Field(default=1, ge=1)
    channels: int = 1
    mlp_ratio: int = Field(default=4, ge=1)
    init_std: float = Field(default=0.02, gt=0)
    use_pos_embed: bool = True

    @model_validator(mode="after")
    def _check_geometry(self) -> "ModelConfig":
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")
        for branch in BRANCHES:
            img, patch = self.img_size(branch), self.patch(branch)
            if img % patch:
                raise ValueError(f"img_size_{branch}={img} is not divisible by patch_{branch}={patch}")
            if self.dim(branch) % self.heads:
                raise ValueError(f"dim_{branch}={self.dim(branch)} is not divisible by heads={self.heads}")
        return self

    def img_size(self, branch: str) -> int:
        return self.img_size_small if branch == "small" else self.img_size_large

    def patch(self, branch: str) -> int:
        return self.patch_small if branch == "small" else self.patch_large

    def dim(self, branch: str) -> int:
        return self.dim_small if branch == "small" else self.dim_large

    def depth(self, branch: str) -> int:
        return self.depth_small if branch == "small" else self.depth_large

    def grid(self, branch: str) -> int:
        """Patches per side."""
        return self.img_size(branch) // self.patch(branch)

    def num_patches(self, branch: str) -> int:
        return self.grid(branch) ** 2

    def patch_dim(self, branch: str) -> int:
        return self.patch(branch) ** 2 * self.channels

    @property
    def taps(self) -> int:
        return max(self.depth_small, self.depth_large)

    @classmethod
    def full_scale(cls) -> "ModelConfig":
        return cls(
            img_size_small=384,
            img_size_large=224,
            patch_small=12,
            patch_large=16,
            dim_small=192,
            dim_large=384,
            depth_small=1,
            depth_large=4,
            heads=6,
            decoder_depth=1,
            channels=3,
        )

    @classmethod
    def gradcheck_toy(cls) -> "ModelConfig":
        return cls(
            img_size_small=16,
            img_size_large=16,
            patch_small=4,
            patch_large=8,
            dim_small=8,
            dim_large=16,
            depth_small=1,
            depth_large=4,
            heads=2,
            init_std=0.2,
        )


class TrainConfig(BaseModel):
    """Optimisation schedule and evaluation protocol."""

    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)

    epochs: int = Field(default=9, ge=1)
    lr: float = Field(default=2e-4, gt=0)
    lr_decay_factor: float = Field(default=10.0, ge=1)
    lr_decay_every: int = Field(default=3, ge=1)
    batch_size: int = Field(default=16, ge=1)
    lambda_: float = Field(default=0.01, ge=0, alias="lambda")
    repeats: int = Field(default=10, ge=1)
    split_fraction: float = Field(default=0.8, gt=0, lt=1)
    seed: int = 0


class SclConfig(BaseModel):
    """Scale contrastive learning and noise sample matching."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    tau: float = Field(default=0.1, gt=0)
    beta_pair: Optional[float] = Field(default=None, ge=0)
    beta_pair_fraction: float = Field(default=0.1, ge=0)
    noise_mode: Literal["all_pairs", "least_similar"] = "all_pairs"
    noise_form: Literal["exp_inverse", "reciprocal"] = "exp_inverse"
    region_grid: int = Field(default=2, ge=1)
    scope: Literal["intra", "inter", "both"] = "intra"
    use_scl: bool = True
    use_nsm: bool = True

    def resolve_beta_pair(self, y_min: float, y_max: float) -> float:
        """Explicit threshold, or a fraction of the training label range."""
        if self.beta_pair is not None:
            return self.beta_pair
        return self.beta_pair_fraction * (y_max - y_min)


class SfaConfig(BaseModel):
    """Selective focus attention."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    alpha_k: float = Field(default=1.0 / 3.0, gt=0, le=1)
    beta_k: float = Field(default=0.75, gt=0, le=1)
    icm_frozen_seed: int = 1234
    mode: Literal["select_att", "cross_att"] = "select_att"
    num_masks: int = Field(default=3, ge=1)
    use_icm: bool = True

    @model_validator(mode="after")
    def _check_range(self) -> "SfaConfig":
        if self.alpha_k > self.beta_k:
            raise ValueError(f"alpha_k={self.alpha_k} must not exceed beta_k={self.beta_k}")
        return self


SECTIONS: Dict[str, Type[BaseModel]] = {
    "model": ModelConfig,
    "train": TrainConfig,
    "scl": SclConfig,
    "sfa": SfaConfig,
}


class RunConfig(BaseModel):
    """All hyperparameters of one run."""

    model_config = ConfigDict(extra="forbid", frozen=True, protected_namespaces=())

    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    scl: SclConfig = Field(default_factory=SclConfig)
    sfa: SfaConfig = Field(default_factory=SfaConfig)

    @model_validator(mode="after")
    def _check_regions(self) -> "RunConfig":
        for branch in BRANCHES:
            grid = self.model.grid(branch)
            if grid % self.scl.region_grid:
                raise ValueError(
                    f"{branch} patch grid {grid}x{grid} is not divisible into "
                    f"{self.scl.region_grid}x{self.scl.region_grid} regions"
                )
        return self

    def to_flat(self) -> Dict[str, Any]:
        """Flat ``key -> value`` view using the config-file keys."""
        flat: Dict[str, Any] = {}
        for section in SECTIONS:
            flat.update(getattr(self, section).model_dump(by_alias=True))
        return flat

    @classmethod
    def from_flat(cls, values: Mapping[str, Any]) -> "RunConfig":
        """
        Build a config from flat keys; missing keys take their defaults.

        Raises:
            ConfigError: On an unknown key or an invalid value
        """
        owners = _key_owners()
        sections: Dict[str, Dict[str, Any]] = {name: {} for name in SECTIONS}
        for key, value in values.items():
            if key not in owners:
                raise ConfigError(f"unknown config key: {key}")
            sections[owners[key]][key] = value
        try:
            return cls.model_validate(sections)
        except ValidationError as e:
            raise ConfigError(_summarise(e)) from e

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        """Copy with flat-key overrides; ``None`` values are ignored."""
        flat = self.to_flat()
        flat.update({k: v for k, v in overrides.items() if v is not None})
        return RunConfig.from_flat(flat)


def _key_owners() -> Dict[str, str]:
    owners: Dict[str, str] = {}
    for section, model in SECTIONS.items():
        for name, field in model.model_fields.items():
            owners[field.alias or name] = section
    return owners


def _summarise(error: ValidationError) -> str:
    parts = []
    for item in error.errors():
        where = ".".join(str(loc) for loc in item["loc"])
        parts.append(f"{where}: {item['msg']}" if where else item["msg"])
    return "; ".join(parts)


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize_config(config: RunConfig) -> str:
    """Render a config as ``key=value`` lines, section by section."""
    lines = []
    for section in SECTIONS:
        lines.append(f"# {section}")
        for key, value in getattr(config, section).model_dump(by_alias=True).items():
            if value is not None:
                lines.append(f"{key}={_format_value(value)}")
    return "\n".join(lines) + "\n"


def parse_config_text(lines: Mapping[str, Optional[str]]) -> RunConfig:
    missing = [key for key, value in lines.items() if value is None]
    if missing:
        raise ConfigError(f"config key without value: {', '.join(missing)}")
    return RunConfig.from_flat({k: v for k, v in lines.items() if v is not None})


def load_config_file(path: Optional[str]) -> RunConfig:
    """
    Load a ``key=value`` config file; ``None`` gives the defaults.

    Raises:
        ConfigError: If the file is missing or holds unknown or invalid keys
    """
    if path is None:
        return RunConfig()
    config_path = Path(path)
    if not config_path.is_file():
        raise ConfigError(f"config file not found: {config_path}")
    return parse_config_text(dotenv_values(config_path, interpolate=False))


def save_config_file(config: RunConfig, path: str) -> None:
    Path(path).write_text(serialize_config(config), encoding="utf-8")


class Settings(BaseSettings):
    """Process settings loaded from environment variables and .env file."""

    log_path: str = Field(default="~/.csfiqa/runs.jsonl")
    log_level: str = Field(default="WARNING")

    model_config = SettingsConfigDict(
        env_prefix="CSFIQA_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    @property
    def expanded_log_path(self) -> Path:
        """Get log path with ~ expanded."""
        return Path(self.log_path).expanduser()


def load_settings() -> Settings:
    """Load settings from the nearest .env file and environment variables."""
    env_path = Path(".env")
    if not env_path.exists():
        current = Path.cwd()
        for parent in [current] + list(current.parents):
            env_candidate = parent / ".env"
            if env_candidate.exists():
                env_path = env_candidate
                break

    if env_path.exists():
        load_dotenv(env_path)

    return Settings()
