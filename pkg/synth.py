"""
Synthetic microscopy generator.

Dark noisy fields with bright elliptical Gaussian blobs standing in for
pathogens. Each blob is annotated with a tight box; everything is a
function of the seed.
"""

import math
import os
from dataclasses import dataclass
from typing import List

import numpy as np

from boxes import BoundingBox
from config import SynthSettings
from dataset import AnnotatedImage
from errors import ConfigError
from raster import from_uint8, save_raster, to_uint8
from utils import derive_seed, ensure_parent_dir, write_json_lines

# half-extent of the annotated box in blob standard deviations
BOX_SIGMAS = 2.5
PLACEMENT_TRIES = 100
TINT = (1.0, 0.62, 0.95)


@dataclass
class SynthConfig:
    """
    Generator settings; every range is inclusive.

    Attributes:
        height / width: Image extent
        channels: 1 (gray) or 3 (RGB)
        blob_count_min / blob_count_max: Blobs per image
        sigma_min / sigma_max: Major-axis standard deviation in pixels
        intensity_min / intensity_max: Peak brightness added over the background
        eccentricity_max: Upper bound of ellipse eccentricity in [0, 1)
        background: Background level
        noise: Standard deviation of per-pixel Gaussian noise
        min_separation: Minimum distance between blob centers
        seed: Fixes the whole image and annotation stream
    """

    height: int = 100
    width: int = 100
    channels: int = 3
    blob_count_min: int = 1
    blob_count_max: int = 4
    sigma_min: float = 1.8
    sigma_max: float = 2.8
    intensity_min: float = 0.55
    intensity_max: float = 0.85
    eccentricity_max: float = 0.6
    background: float = 0.12
    noise: float = 0.03
    min_separation: float = 24.0
    seed: int = 42

    def __post_init__(self):
        checks = [
            (self.channels in (1, 3), "channels must be 1 or 3"),
            (0 <= self.blob_count_min <= self.blob_count_max, "blob counts need 0 <= min <= max"),
            (0 < self.sigma_min <= self.sigma_max, "sigma range needs 0 < min <= max"),
            (0 < self.intensity_min <= self.intensity_max, "intensity range needs 0 < min <= max"),
            (0 <= self.eccentricity_max < 1, "eccentricity_max must be in [0, 1)"),
            (0 <= self.background < 1, "background must be in [0, 1)"),
            (self.noise >= 0, "noise must be >= 0"),
            (self.min_separation >= 0, "min_separation must be >= 0"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        if min(self.height, self.width) <= 2 * self.margin:
            raise ConfigError(f"{self.width}x{self.height} image too small for sigma_max {self.sigma_max}")

    @property
    def margin(self) -> float:
        return BOX_SIGMAS * self.sigma_max + 1.0

    @classmethod
    def from_settings(cls, settings: SynthSettings, seed: int) -> 'SynthConfig':
        return cls(
            height=settings.image_height,
            width=settings.image_width,
            channels=settings.channels,
            blob_count_min=settings.blob_count_min,
            blob_count_max=settings.blob_count_max,
            sigma_min=settings.sigma_min,
            sigma_max=settings.sigma_max,
            intensity_min=settings.intensity_min,
            intensity_max=settings.intensity_max,
            eccentricity_max=settings.eccentricity_max,
            background=settings.background,
            noise=settings.noise,
            min_separation=settings.min_separation,
            seed=seed,
        )


def blob_profile(height: int, width: int, blob: dict) -> np.ndarray:
    """Peak-normalized elliptical Gaussian of one blob over the pixel grid (pixel centers at i + 0.5)."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64) + 0.5
    dx = xx - blob["cx"]
    dy = yy - blob["cy"]
    c, s = math.cos(blob["angle"]), math.sin(blob["angle"])
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return np.exp(-0.5 * ((u / blob["sigma_x"]) ** 2 + (v / blob["sigma_y"]) ** 2))


def blob_box(blob: dict, width: int, height: int) -> BoundingBox:
    """Integer box covering BOX_SIGMAS standard deviations of the rotated ellipse."""
    c, s = math.cos(blob["angle"]), math.sin(blob["angle"])
    hx = BOX_SIGMAS * math.hypot(blob["sigma_x"] * c, blob["sigma_y"] * s)
    hy = BOX_SIGMAS * math.hypot(blob["sigma_x"] * s, blob["sigma_y"] * c)
    x0 = max(0, int(math.floor(blob["cx"] - hx)))
    y0 = max(0, int(math.floor(blob["cy"] - hy)))
    x1 = min(width, int(math.ceil(blob["cx"] + hx)))
    y1 = min(height, int(math.ceil(blob["cy"] + hy)))
    return BoundingBox(x0, y0, x1 - x0, y1 - y0, label="pathogen")


def _place_blobs(cfg: SynthConfig, rng: np.random.Generator) -> List[dict]:
    count = int(rng.integers(cfg.blob_count_min, cfg.blob_count_max + 1))
    blobs: List[dict] = []
    for _ in range(count):
        for _ in range(PLACEMENT_TRIES):
            cx = float(rng.uniform(cfg.margin, cfg.width - cfg.margin))
            cy = float(rng.uniform(cfg.margin, cfg.height - cfg.margin))
            if all(math.hypot(cx - b["cx"], cy - b["cy"]) >= cfg.min_separation for b in blobs):
                break
        else:
            continue
        sigma_x = float(rng.uniform(cfg.sigma_min, cfg.sigma_max))
        eccentricity = float(rng.uniform(0.0, cfg.eccentricity_max))
        blobs.append({
            "cx": cx,
            "cy": cy,
            "sigma_x": sigma_x,
            "sigma_y": sigma_x * math.sqrt(1.0 - eccentricity ** 2),
            "angle": float(rng.uniform(0.0, math.pi)),
            "intensity": float(rng.uniform(cfg.intensity_min, cfg.intensity_max)),
        })
    return blobs


def render_synthetic(cfg: SynthConfig, index: int) -> AnnotatedImage:
    """Generate image number index of the stream."""
    rng = np.random.default_rng(derive_seed(cfg.seed, index))
    blobs = _place_blobs(cfg, rng)

    image = np.full((cfg.channels, cfg.height, cfg.width), cfg.background, dtype=np.float64)
    if cfg.noise > 0:
        image += rng.normal(0.0, cfg.noise, size=image.shape)
    tint = np.asarray(TINT[:cfg.channels] if cfg.channels == 3 else (1.0,))
    for blob in blobs:
        image += blob["intensity"] * tint[:, None, None] * blob_profile(cfg.height, cfg.width, blob)[None]

    # snap to 8-bit so the in-memory image equals the written file
    pixels = from_uint8(to_uint8(np.clip(image, 0.0, 1.0)))
    ext = "ppm" if cfg.channels == 3 else "pgm"
    boxes = [blob_box(blob, cfg.width, cfg.height) for blob in blobs]
    return AnnotatedImage(path=f"img_{index:04d}.{ext}", pixels=pixels, boxes=boxes, meta={"blobs": blobs})


def generate_synthetic(cfg: SynthConfig, image_count: int) -> List[AnnotatedImage]:
    """
    Generate a seeded stream of annotated synthetic images.

    Args:
        cfg: Generator settings
        image_count: Number of images

    Returns:
        AnnotatedImage list; blob parameters are in each image's meta
    """
    return [render_synthetic(cfg, i) for i in range(image_count)]


def write_synthetic(images: List[AnnotatedImage], out_dir: str, annotations_name: str = "annotations.jsonl") -> str:
    """
    Write images and their JSON-lines annotation file.

    Returns:
        Path of the annotation file
    """
    os.makedirs(out_dir, exist_ok=True)
    for image in images:
        target = os.path.join(out_dir, image.path)
        ensure_parent_dir(target)
        save_raster(image.pixels, target)
    annotations_path = os.path.join(out_dir, annotations_name)
    write_json_lines(annotations_path, (image.to_record() for image in images))
    return annotations_path
