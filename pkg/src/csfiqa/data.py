"""
Synthetic distorted images, the dataset manifest and image loading.

Images are binary PGM/PPM files. A manifest is a two-column CSV with the
header ``path,mos``; paths are relative to the manifest's directory.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy.ndimage import gaussian_filter

from .config import BRANCHES, ModelConfig
from .errors import DataError

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.csv"
MANIFEST_HEADER = ("path", "mos")
NATIVE_SIZE = 64

BASE_PATTERNS = ("gradient", "checkerboard", "smooth")
DISTORTIONS = ("blur", "noise", "quantize", "exposure")

MAX_BLUR_SIGMA = 4.0
MAX_NOISE_SIGMA = 0.3
MAX_QUANT_LEVEL = 8
MAX_EXPOSURE_GAIN = 3.0

# RMS pixel change that counts as fully degraded.
MAX_RMS_CHANGE = 0.5


@dataclass
class ImageSample:
    """
    One labelled image.

    ``pixels`` holds the decoded image (H, W, C) in [0, 1]; ``views`` holds
    it resampled to each branch's resolution.
    """

    id: str
    pixels: np.ndarray
    mos: float
    views: Dict[str, np.ndarray] = field(default_factory=dict)

    def view(self, branch: str) -> np.ndarray:
        return self.views.get(branch, self.pixels)


@dataclass
class ManifestRow:
    path: str
    mos: float


@dataclass
class DatasetManifest:
    root: Path
    rows: List[ManifestRow]

    @property
    def y_min(self) -> float:
        return min(row.mos for row in self.rows)

    @property
    def y_max(self) -> float:
        return max(row.mos for row in self.rows)

    def __len__(self) -> int:
        return len(self.rows)


@dataclass(frozen=True)
class Distortion:
    kind: str
    severity: float
    brighten: bool = True


def proxy_mos(severity: float) -> float:
    """Strictly decreasing map of severity in [0, 1] onto quality in [0, 1]."""
    floor = math.exp(-3.0)
    return (math.exp(-3.0 * severity) - floor) / (1.0 - floor)


def effective_severity(base: np.ndarray, distorted: np.ndarray) -> float:
    """
    Severity in [0, 1] of the change a distortion actually made.

    Measured as the RMS pixel difference from the pristine image over
    ``MAX_RMS_CHANGE``, so an unchanged image has severity 0 whatever
    parameter was drawn.
    """
    change = float(np.sqrt(np.mean((distorted - base) ** 2)))
    return min(1.0, change / MAX_RMS_CHANGE)


# Base patterns


def render_base(pattern: str, rng: np.random.Generator, size: int = NATIVE_SIZE) -> np.ndarray:
    """Procedural pristine image (size, size) in [0, 1]."""
    if pattern == "gradient":
        angle = rng.uniform(0.0, 2.0 * math.pi)
        ys, xs = np.mgrid[0:size, 0:size] / (size - 1)
        ramp = np.cos(angle) * xs + np.sin(angle) * ys
        span = ramp.max() - ramp.min()
        return (ramp - ramp.min()) / span if span > 0 else np.full((size, size), 0.5)
    elif pattern == "checkerboard":
        cell = int(rng.choice([4, 8, 16]))
        low, high = rng.uniform(0.0, 0.15), rng.uniform(0.85, 1.0)
        ys, xs = np.mgrid[0:size, 0:size]
        return np.where(((ys // cell) + (xs // cell)) % 2 == 0, low, high)
    elif pattern == "smooth":
        field_ = gaussian_filter(rng.random((size, size)), sigma=6.0, mode="wrap")
        span = field_.max() - field_.min()
        return (field_ - field_.min()) / span if span > 0 else np.full((size, size), 0.5)
    else:
        raise ValueError(f"Unknown base pattern: {pattern}")


# Distortions


def blur(image: np.ndarray, severity: float) -> np.ndarray:
    sigma = MAX_BLUR_SIGMA * severity
    if sigma == 0.0:
        return image.copy()
    return gaussian_filter(image, sigma=sigma, mode="reflect")


def add_noise(image: np.ndarray, severity: float, rng: np.random.Generator) -> np.ndarray:
    noise = rng.normal(0.0, MAX_NOISE_SIGMA * severity, size=image.shape)
    return np.clip(image + noise, 0.0, 1.0)


def quant_level(severity: float) -> int:
    """Block size in 1..MAX_QUANT_LEVEL for a severity in [0, 1]."""
    return 1 + int(round((MAX_QUANT_LEVEL - 1) * severity))


def quantize_blocks(image: np.ndarray, severity: float) -> np.ndarray:
    """Replace each level x level block by its mean; level 1 is lossless."""
    level = quant_level(severity)
    if level == 1:
        return image.copy()
    out = image.copy()
    height, width = image.shape
    for top in range(0, height, level):
        for left in range(0, width, level):
            block = image[top : top + level, left : left + level]
            out[top : top + level, left : left + level] = block.mean()
    return out


def expose(image: np.ndarray, severity: float, brighten: bool) -> np.ndarray:
    gain = 1.0 + (MAX_EXPOSURE_GAIN - 1.0) * severity
    return np.clip(image * gain if brighten else image / gain, 0.0, 1.0)


def apply_distortion(image: np.ndarray, distortion: Distortion, rng: np.random.Generator) -> np.ndarray:
    """Apply one distortion family to a single-channel image."""
    if distortion.kind == "blur":
        return blur(image, distortion.severity)
    elif distortion.kind == "noise":
        return add_noise(image, distortion.severity, rng)
    elif distortion.kind == "quantize":
        return quantize_blocks(image, distortion.severity)
    elif distortion.kind == "exposure":
        return expose(image, distortion.severity, distortion.brighten)
    else:
        raise ValueError(f"Unknown distortion: {distortion.kind}")


# Image I/O


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(path: Union[str, Path], pixels: np.ndarray) -> None:
    """Write (H, W) or (H, W, 1) as P5, (H, W, 3) as P6."""
    data = to_uint8(pixels)
    if data.ndim == 3 and data.shape[2] == 1:
        data = data[:, :, 0]
    Image.fromarray(data).save(path, format="PPM")


def read_image(path: Union[str, Path], channels: int = 1) -> np.ndarray:
    """
    Decode a portable pixmap into (H, W, channels) floats in [0, 1].

    Raises:
        DataError: If the file is missing or not a decodable image
    """
    image_path = Path(path)
    if not image_path.is_file():
        raise DataError(f"image not found: {image_path}")
    try:
        with Image.open(image_path) as image:
            decoded = np.asarray(image.convert("L" if channels == 1 else "RGB"), dtype=np.float64)
    except (UnidentifiedImageError, OSError) as e:
        raise DataError(f"cannot decode image {image_path}: {e}") from e
    if decoded.ndim == 2:
        decoded = decoded[:, :, None]
    return decoded / 255.0


def resize_bilinear(pixels: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resample of (H, W, C) to (size, size, C); same size is a copy."""
    height, width, channels = pixels.shape
    if height == size and width == size:
        return pixels.copy()
    planes = []
    for c in range(channels):
        plane = Image.fromarray(pixels[:, :, c].astype(np.float32))
        resized = plane.resize((size, size), Image.Resampling.BILINEAR)
        planes.append(np.asarray(resized, dtype=np.float64))
    return np.clip(np.stack(planes, axis=-1), 0.0, 1.0)


# Manifest


def write_manifest(path: Union[str, Path], rows: Sequence[ManifestRow]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for row in rows:
            writer.writerow([row.path, repr(float(row.mos))])


def read_manifest(path: Union[str, Path]) -> DatasetManifest:
    """
    Parse a ``path,mos`` manifest.

    Raises:
        DataError: On a missing file, a bad header, a malformed row
            (with its line number), a non-finite label, or labels that
            are all equal
    """
    manifest_path = Path(path)
    if not manifest_path.is_file():
        raise DataError(f"manifest not found: {manifest_path}")

    rows: List[ManifestRow] = []
    with open(manifest_path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or tuple(cell.strip() for cell in header) != MANIFEST_HEADER:
            raise DataError(f"{manifest_path}:1: expected header 'path,mos'")
        for record in reader:
            line = reader.line_num
            if not record or all(not cell.strip() for cell in record):
                continue
            if len(record) != 2:
                raise DataError(f"{manifest_path}:{line}: expected 2 columns, got {len(record)}")
            rel, raw = record[0].strip(), record[1].strip()
            try:
                mos = float(raw)
            except ValueError:
                raise DataError(f"{manifest_path}:{line}: label is not a number: {raw!r}") from None
            if not math.isfinite(mos):
                raise DataError(f"{manifest_path}:{line}: non-finite label {raw!r}")
            if not rel:
                raise DataError(f"{manifest_path}:{line}: empty image path")
            rows.append(ManifestRow(path=rel, mos=mos))

    if not rows:
        raise DataError(f"{manifest_path}: manifest has no rows")
    manifest = DatasetManifest(root=manifest_path.parent, rows=rows)
    if not manifest.y_min < manifest.y_max:
        raise DataError(f"{manifest_path}: every label is {manifest.y_min!r}; need at least two distinct labels")
    return manifest


# Dataset


def synth_generate(
    n: int,
    seed: int,
    out_dir: Union[str, Path],
    size: int = NATIVE_SIZE,
) -> DatasetManifest:
    """
    Render ``n`` distorted single-channel images and their proxy labels.

    Each image draws a base pattern, a distortion family and a severity in
    [0, 1]. Its label is ``proxy_mos`` of the effective severity, so blur
    on a smooth field or a block size that matches the checkerboard cells
    keeps a high label.

    Raises:
        DataError: If ``out_dir`` cannot be created or written
    """
    if n < 1:
        raise DataError(f"synth-data needs n >= 1, got {n}")
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create {root}: {e}") from e

    rng = np.random.default_rng(seed)
    rows: List[ManifestRow] = []
    try:
        for i in range(n):
            pattern = BASE_PATTERNS[int(rng.integers(len(BASE_PATTERNS)))]
            base = render_base(pattern, rng, size)
            distortion = Distortion(
                kind=DISTORTIONS[int(rng.integers(len(DISTORTIONS)))],
                severity=float(rng.uniform(0.0, 1.0)),
                brighten=bool(rng.integers(2)),
            )
            image = apply_distortion(base, distortion, rng)
            name = f"img_{i:05d}.pgm"
            write_image(root / name, image)
            rows.append(ManifestRow(path=name, mos=proxy_mos(effective_severity(base, image))))
        write_manifest(root / MANIFEST_NAME, rows)
    except OSError as e:
        raise DataError(f"cannot write dataset to {root}: {e}") from e

    logger.info("wrote %d synthetic images to %s", n, root)
    return DatasetManifest(root=root, rows=rows)


def load_sample(path: Path, mos: float, config: ModelConfig, sample_id: Optional[str] = None) -> ImageSample:
    pixels = read_image(path, config.channels)
    views = {branch: resize_bilinear(pixels, config.img_size(branch)) for branch in BRANCHES}
    return ImageSample(id=sample_id or path.name, pixels=pixels, mos=mos, views=views)


def load_dataset(manifest_path: Union[str, Path], config: ModelConfig) -> List[ImageSample]:
    """
    Load every manifest row, resampled to both branch resolutions.

    Labels pass through unchanged.

    Raises:
        DataError: On any manifest or image problem, naming the path
    """
    manifest = read_manifest(manifest_path)
    samples = []
    for row in manifest.rows:
        samples.append(load_sample(manifest.root / row.path, row.mos, config, sample_id=row.path))
    logger.debug("loaded %d samples from %s", len(samples), manifest_path)
    return samples
