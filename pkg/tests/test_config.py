"""Tests for run configuration and process settings."""

import pytest
from pydantic import ValidationError

from csfiqa.config import (
    ModelConfig,
    RunConfig,
    SclConfig,
    Settings,
    load_config_file,
    save_config_file,
    serialize_config,
)
from csfiqa.errors import EXIT_DATA, EXIT_NUMERIC, EXIT_USAGE, ConfigError, DataError, MetricError


class TestModelConfig:
    """Test branch geometry."""

    def test_defaults_are_consistent(self):
        """Test the default desk-scale geometry."""
        config = ModelConfig()
        assert config.grid("small") == 4
        assert config.grid("large") == 2
        assert config.num_patches("small") == 16
        assert config.patch_dim("large") == 196
        assert config.taps == 4

    def test_full_scale_geometry(self):
        """Test that the full-size preset validates."""
        config = ModelConfig.full_scale()
        assert config.num_patches("small") == 1024
        assert config.num_patches("large") == 196
        assert config.patch_dim("small") == 432

    def test_indivisible_image_rejected(self):
        """Test that an image not divisible into patches is rejected."""
        with pytest.raises(ValidationError, match="not divisible"):
            ModelConfig(img_size_small=50)

    def test_heads_must_divide_width(self):
        """Test that the head count divides each branch width."""
        with pytest.raises(ValidationError):
            ModelConfig(heads=5)

    def test_channels_restricted(self):
        """Test that only grey or RGB input is accepted."""
        with pytest.raises(ValidationError):
            ModelConfig(channels=2)


class TestRunConfig:
    """Test flat-key loading, overrides and serialisation."""

    def setup_method(self):
        """Set up test fixtures."""
        self.config = RunConfig()

    def test_unknown_key_rejected(self):
        """Test that unknown keys raise a config error."""
        with pytest.raises(ConfigError, match="unknown config key: learning_rate"):
            RunConfig.from_flat({"learning_rate": "0.1"})

    def test_invalid_value_rejected(self):
        """Test that an out-of-range value raises a config error."""
        with pytest.raises(ConfigError, match="tau"):
            RunConfig.from_flat({"tau": "-1"})

    def test_top_k_range_ordered(self):
        """Test that alpha_k may not exceed beta_k."""
        with pytest.raises(ConfigError, match="alpha_k"):
            RunConfig.from_flat({"alpha_k": "0.9", "beta_k": "0.5"})

    def test_region_grid_must_divide_patch_grids(self):
        """Test that regions must tile both patch grids."""
        with pytest.raises(ConfigError, match="regions"):
            RunConfig.from_flat({"region_grid": "3"})

    def test_lambda_alias(self):
        """Test that the auxiliary weight is keyed as lambda."""
        config = self.config.with_overrides(**{"lambda": 0.5})
        assert config.train.lambda_ == 0.5
        assert config.to_flat()["lambda"] == 0.5

    def test_none_overrides_ignored(self):
        """Test that unset CLI options keep the file values."""
        assert self.config.with_overrides(tau=None, epochs=None) == self.config

    def test_serialisation_has_every_section(self):
        """Test the section comments and representative keys."""
        text = serialize_config(self.config)
        for section in ("# model", "# train", "# scl", "# sfa"):
            assert section in text
        assert "alpha_k=0.3333333333333333\n" in text
        assert "use_icm=true\n" in text
        assert "beta_pair=" not in text

    def test_file_round_trip(self, tmp_path):
        """Test that saving and loading gives an equal config."""
        config = self.config.with_overrides(tau=0.07, beta_pair=0.25, scope="both", noise_mode="least_similar")
        path = tmp_path / "run.cfg"
        save_config_file(config, str(path))
        assert load_config_file(str(path)) == config

    def test_comments_and_partial_files(self, tmp_path):
        """Test that missing keys take defaults and comments are skipped."""
        path = tmp_path / "run.cfg"
        path.write_text("# override only the schedule\nepochs=2\nlr=0.001\n", encoding="utf-8")
        config = load_config_file(str(path))
        assert config.train.epochs == 2
        assert config.train.lr == 0.001
        assert config.model == ModelConfig()

    def test_missing_file(self, tmp_path):
        """Test that a missing config file is a config error."""
        with pytest.raises(ConfigError, match="not found"):
            load_config_file(str(tmp_path / "absent.cfg"))

    def test_none_path_gives_defaults(self):
        """Test that no config file means the defaults."""
        assert load_config_file(None) == RunConfig()


class TestSclConfig:
    """Test the positive-pair threshold resolution."""

    def test_fraction_of_label_range(self):
        """Test the default fraction of the label range."""
        assert SclConfig().resolve_beta_pair(0.0, 2.0) == pytest.approx(0.2)

    def test_explicit_threshold_wins(self):
        """Test that an explicit threshold overrides the fraction."""
        assert SclConfig(beta_pair=0.05).resolve_beta_pair(0.0, 2.0) == 0.05


class TestSettings:
    """Test environment-driven settings."""

    def test_defaults(self, monkeypatch):
        """Test default log location and level."""
        monkeypatch.delenv("CSFIQA_LOG_PATH", raising=False)
        monkeypatch.delenv("CSFIQA_LOG_LEVEL", raising=False)
        settings = Settings(_env_file=None)
        assert settings.log_level == "WARNING"
        assert settings.expanded_log_path.name == "runs.jsonl"
        assert "~" not in str(settings.expanded_log_path)

    def test_environment_override(self, monkeypatch, tmp_path):
        """Test the CSFIQA_ prefix."""
        monkeypatch.setenv("CSFIQA_LOG_LEVEL", "DEBUG")
        monkeypatch.setenv("CSFIQA_LOG_PATH", str(tmp_path / "log.jsonl"))
        settings = Settings(_env_file=None)
        assert settings.log_level == "DEBUG"
        assert settings.expanded_log_path == tmp_path / "log.jsonl"


class TestExitCodes:
    """Test the error-to-exit-code mapping."""

    def test_codes(self):
        """Test one error of each kind."""
        assert ConfigError("x").exit_code == EXIT_USAGE == 1
        assert DataError("x").exit_code == EXIT_DATA == 2
        assert MetricError("x").exit_code == EXIT_NUMERIC == 3
