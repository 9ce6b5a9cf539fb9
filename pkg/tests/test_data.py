"""Tests for synthetic data, image I/O and manifests."""

import math

import numpy as np
import pytest

from csfiqa.config import ModelConfig
from csfiqa.data import (
    BASE_PATTERNS,
    MANIFEST_NAME,
    Distortion,
    ManifestRow,
    add_noise,
    apply_distortion,
    blur,
    effective_severity,
    expose,
    load_dataset,
    proxy_mos,
    quant_level,
    quantize_blocks,
    read_image,
    read_manifest,
    render_base,
    resize_bilinear,
    synth_generate,
    to_uint8,
    write_image,
    write_manifest,
)
from csfiqa.errors import DataError


class TestProxyMos:
    """Test the severity-to-quality map."""

    def test_endpoints(self):
        """Test that pristine maps to 1 and worst to 0."""
        assert proxy_mos(0.0) == 1.0
        assert proxy_mos(1.0) == 0.0

    def test_strictly_decreasing(self):
        """Test monotonicity over a fine grid."""
        values = [proxy_mos(s) for s in np.linspace(0.0, 1.0, 101)]
        assert all(a > b for a, b in zip(values, values[1:]))


class TestEffectiveSeverity:
    """Test labels derived from the change a distortion actually made."""

    def setup_method(self):
        """Set up test fixtures."""
        self.checker = render_base("checkerboard", np.random.default_rng(1))
        self.smooth = render_base("smooth", np.random.default_rng(2))

    def test_unchanged_image_is_pristine(self):
        """Test severity 0 and label 1 for an untouched image."""
        assert effective_severity(self.smooth, self.smooth.copy()) == 0.0
        assert proxy_mos(effective_severity(self.smooth, self.smooth.copy())) == 1.0

    def test_level_one_quantization_is_pristine(self):
        """Test that a small severity rounding to block size 1 keeps label 1."""
        assert quant_level(0.05) == 1
        assert quant_level(1.0) == 8
        image = quantize_blocks(self.smooth, 0.05)
        assert proxy_mos(effective_severity(self.smooth, image)) == 1.0

    def test_zero_noise_is_pristine(self):
        """Test that noise with sigma 0 keeps label 1."""
        image = add_noise(self.smooth, 0.0, np.random.default_rng(0))
        assert proxy_mos(effective_severity(self.smooth, image)) == 1.0

    def test_label_decreases_with_blur_sigma(self):
        """Test strictly lower labels for stronger blur on one base image."""
        severities = (0.0, 0.125, 0.25, 0.5, 1.0)
        labels = [proxy_mos(effective_severity(self.checker, blur(self.checker, s))) for s in severities]
        assert labels[0] == 1.0
        assert all(a > b for a, b in zip(labels, labels[1:]))

    def test_label_decreases_with_noise_sigma(self):
        """Test strictly lower labels for stronger noise of one realisation."""
        labels = []
        for severity in (0.1, 0.5, 1.0):
            noisy = add_noise(self.smooth, severity, np.random.default_rng(7))
            labels.append(proxy_mos(effective_severity(self.smooth, noisy)))
        assert all(a > b for a, b in zip(labels, labels[1:]))

    def test_invisible_change_scores_higher(self):
        """Test that the same blur costs a smooth field less than a checkerboard."""
        smooth_label = proxy_mos(effective_severity(self.smooth, blur(self.smooth, 0.5)))
        checker_label = proxy_mos(effective_severity(self.checker, blur(self.checker, 0.5)))
        assert smooth_label > checker_label

    def test_bounded(self):
        """Test that severity saturates at 1."""
        assert effective_severity(np.zeros((4, 4)), np.ones((4, 4))) == 1.0


class TestDistortions:
    """Test the distortion families."""

    def setup_method(self):
        """Set up test fixtures."""
        self.rng = np.random.default_rng(0)
        self.image = render_base("checkerboard", np.random.default_rng(1))

    def test_base_patterns_in_range(self):
        """Test every base pattern's shape and range."""
        for pattern in BASE_PATTERNS:
            base = render_base(pattern, self.rng, size=32)
            assert base.shape == (32, 32)
            assert base.min() >= 0.0 and base.max() <= 1.0

    def test_blur_monotone(self):
        """Test that stronger blur removes more contrast."""
        assert np.array_equal(blur(self.image, 0.0), self.image)
        assert np.std(blur(self.image, 0.25)) > np.std(blur(self.image, 0.75))

    def test_noise_clipped(self):
        """Test that noisy pixels stay in range."""
        noisy = add_noise(self.image, 1.0, self.rng)
        assert noisy.min() >= 0.0 and noisy.max() <= 1.0
        assert not np.array_equal(noisy, self.image)

    def test_quantize_blocks(self):
        """Test lossless level 1 and constant 8x8 blocks at full severity."""
        smooth = render_base("smooth", self.rng)
        assert np.array_equal(quantize_blocks(smooth, 0.0), smooth)
        blocks = quantize_blocks(smooth, 1.0)
        assert np.all(blocks[:8, :8] == blocks[0, 0])
        assert blocks[0, 0] == pytest.approx(smooth[:8, :8].mean())

    def test_exposure(self):
        """Test brightening and darkening gains."""
        flat = np.full((4, 4), 0.2)
        assert np.allclose(expose(flat, 0.5, brighten=True), 0.4)
        assert np.allclose(expose(flat, 0.5, brighten=False), 0.1)
        assert expose(np.full((2, 2), 0.9), 1.0, brighten=True).max() == 1.0

    def test_unknown_distortion(self):
        """Test that an unknown family is rejected."""
        with pytest.raises(ValueError):
            apply_distortion(self.image, Distortion("smear", 0.5), self.rng)


class TestImageIO:
    """Test portable pixmap reading, writing and resampling."""

    def test_grey_round_trip(self, tmp_path):
        """Test that a written image reads back at 8-bit precision."""
        pixels = np.random.default_rng(2).random((8, 6))
        path = tmp_path / "img.pgm"
        write_image(path, pixels)
        assert path.read_bytes().startswith(b"P5")
        decoded = read_image(path)
        assert decoded.shape == (8, 6, 1)
        assert np.array_equal(decoded[:, :, 0], to_uint8(pixels) / 255.0)

    def test_rgb_round_trip(self, tmp_path):
        """Test three-channel images."""
        pixels = np.random.default_rng(3).random((4, 4, 3))
        path = tmp_path / "img.ppm"
        write_image(path, pixels)
        assert path.read_bytes().startswith(b"P6")
        assert np.array_equal(read_image(path, channels=3), to_uint8(pixels) / 255.0)

    def test_missing_image(self, tmp_path):
        """Test that a missing image is a data error naming the path."""
        with pytest.raises(DataError, match="absent.pgm"):
            read_image(tmp_path / "absent.pgm")

    def test_undecodable_image(self, tmp_path):
        """Test that garbage bytes are a data error."""
        path = tmp_path / "broken.pgm"
        path.write_bytes(b"not an image")
        with pytest.raises(DataError, match="cannot decode"):
            read_image(path)

    def test_resize(self):
        """Test the same-size copy and a constant image."""
        pixels = np.random.default_rng(4).random((8, 8, 1))
        same = resize_bilinear(pixels, 8)
        assert np.array_equal(same, pixels)
        assert same is not pixels
        resized = resize_bilinear(np.full((64, 64, 1), 0.5), 16)
        assert resized.shape == (16, 16, 1)
        assert np.allclose(resized, 0.5)


class TestManifest:
    """Test manifest parsing and its errors."""

    def _manifest(self, tmp_path, text):
        path = tmp_path / "manifest.csv"
        path.write_text(text, encoding="utf-8")
        return path

    def test_round_trip(self, tmp_path):
        """Test that labels survive a write and read bit-exactly."""
        rows = [ManifestRow("a.pgm", 1.0 / 3.0), ManifestRow("b.pgm", 0.1)]
        path = tmp_path / "manifest.csv"
        write_manifest(path, rows)
        manifest = read_manifest(path)
        assert [(r.path, r.mos) for r in manifest.rows] == [("a.pgm", 1.0 / 3.0), ("b.pgm", 0.1)]
        assert manifest.root == tmp_path
        assert (manifest.y_min, manifest.y_max) == (0.1, 1.0 / 3.0)

    def test_blank_lines_skipped(self, tmp_path):
        """Test that blank lines are ignored."""
        manifest = read_manifest(self._manifest(tmp_path, "path,mos\n\na.pgm,0.5\n\nb.pgm,0.25\n"))
        assert len(manifest) == 2

    def test_missing_manifest(self, tmp_path):
        """Test the data error for a missing file."""
        with pytest.raises(DataError, match="not found"):
            read_manifest(tmp_path / "nope.csv")

    def test_bad_header(self, tmp_path):
        """Test the header check."""
        with pytest.raises(DataError, match=":1:"):
            read_manifest(self._manifest(tmp_path, "file,score\na.pgm,0.5\n"))

    def test_malformed_row_line_number(self, tmp_path):
        """Test that a short row reports its line."""
        with pytest.raises(DataError, match=r":3: expected 2 columns"):
            read_manifest(self._manifest(tmp_path, "path,mos\na.pgm,0.5\nbad\n"))

    def test_non_numeric_label(self, tmp_path):
        """Test a label that is not a number."""
        with pytest.raises(DataError, match=r":2: label is not a number"):
            read_manifest(self._manifest(tmp_path, "path,mos\na.pgm,good\n"))

    def test_non_finite_label(self, tmp_path):
        """Test NaN and infinite labels."""
        for raw in ("nan", "inf"):
            with pytest.raises(DataError, match="non-finite"):
                read_manifest(self._manifest(tmp_path, f"path,mos\na.pgm,{raw}\n"))

    def test_constant_labels(self, tmp_path):
        """Test that a manifest without a label range is a data error."""
        with pytest.raises(DataError, match="distinct labels"):
            read_manifest(self._manifest(tmp_path, "path,mos\na.pgm,0.5\nb.pgm,0.5\n"))
        with pytest.raises(DataError, match="distinct labels"):
            read_manifest(self._manifest(tmp_path, "path,mos\na.pgm,0.5\n"))

    def test_empty_manifest(self, tmp_path):
        """Test a header without rows."""
        with pytest.raises(DataError, match="no rows"):
            read_manifest(self._manifest(tmp_path, "path,mos\n"))


class TestSynthetic:
    """Test dataset generation and loading."""

    def test_deterministic(self, tmp_path):
        """Test byte-identical datasets for the same seed."""
        synth_generate(5, 3, tmp_path / "a")
        synth_generate(5, 3, tmp_path / "b")
        names = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert MANIFEST_NAME in names
        assert len(names) == 6
        for name in names:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_labels_in_unit_range(self, tmp_path):
        """Test that proxy labels lie in [0, 1]."""
        manifest = synth_generate(20, 0, tmp_path)
        assert all(0.0 <= row.mos <= 1.0 and math.isfinite(row.mos) for row in manifest.rows)

    def test_load_dataset(self, tmp_path):
        """Test loading with labels unchanged and both branch views."""
        manifest = synth_generate(6, 1, tmp_path)
        config = ModelConfig.gradcheck_toy()
        samples = load_dataset(tmp_path / MANIFEST_NAME, config)
        assert [s.id for s in samples] == [f"img_{i:05d}.pgm" for i in range(6)]
        assert [s.mos for s in samples] == [row.mos for row in manifest.rows]
        assert samples[0].pixels.shape == (64, 64, 1)
        assert samples[0].view("small").shape == (16, 16, 1)
        assert all(0.0 <= s.view("large").min() and s.view("large").max() <= 1.0 for s in samples)

    def test_missing_image_in_manifest(self, tmp_path):
        """Test that a listed but missing image names its path."""
        synth_generate(3, 0, tmp_path)
        (tmp_path / "img_00001.pgm").unlink()
        with pytest.raises(DataError, match="img_00001.pgm"):
            load_dataset(tmp_path / MANIFEST_NAME, ModelConfig())

    def test_invalid_count(self, tmp_path):
        """Test that at least one image is required."""
        with pytest.raises(DataError):
            synth_generate(0, 0, tmp_path)

    def test_unwritable_directory(self, tmp_path):
        """Test the data error when the output path is under a file."""
        blocker = tmp_path / "file.txt"
        blocker.write_text("x", encoding="utf-8")
        with pytest.raises(DataError, match="cannot create"):
            synth_generate(2, 0, blocker / "out")
