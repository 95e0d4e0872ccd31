"""Synthetic labeled datasets for smoke tests and pipeline demos.

Real face-quality corpora with subjective scores are rarely redistributable,
so this generator builds structured random images whose quality label is a
known smooth function of two controllable statistics: blur level and mean
brightness. Brightness dominates (75/25) so the label stays learnable from
scratch at desk scale; both terms are monotone.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .data import ManifestEntry

MAX_BLUR_SIGMA = 3.0  # effective sigma at the 416-wide network scale
BRIGHTNESS_RANGE = (0.25, 0.75)
BRIGHTNESS_WEIGHT = 0.75
SHARPNESS_WEIGHT = 0.25


def quality_label(brightness: float, blur_sigma: float) -> float:
    """Smooth MOS in [1, 5]: rises with brightness, falls with blur."""
    lo, hi = BRIGHTNESS_RANGE
    bright01 = (brightness - lo) / (hi - lo)
    sharp01 = 1.0 - blur_sigma / MAX_BLUR_SIGMA
    mixed = BRIGHTNESS_WEIGHT * bright01 + SHARPNESS_WEIGHT * sharp01
    return 1.0 + 4.0 * mixed


def _base_pattern(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    yy, xx = np.meshgrid(
        np.linspace(0.0, 1.0, height), np.linspace(0.0, 1.0, width), indexing="ij"
    )
    img = 0.5 + rng.uniform(-0.3, 0.3) * (xx - 0.5) + rng.uniform(-0.3, 0.3) * (yy - 0.5)
    for _ in range(rng.integers(3, 7)):
        cy, cx = rng.uniform(0.1, 0.9, size=2)
        ry, rx = rng.uniform(0.05, 0.3, size=2)
        mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 < 1.0
        img = np.where(mask, img + rng.uniform(-0.35, 0.35), img)
    speckle = rng.choice([-0.25, 0.0, 0.25], size=img.shape, p=[0.15, 0.7, 0.15])
    return img + speckle


@dataclass
class SyntheticSample:
    entry: ManifestEntry
    brightness: float
    blur_sigma: float


def generate_synthetic_dataset(
    out_dir: str | Path,
    count: int = 256,
    seed: int = 0,
    width_range: tuple[int, int] = (200, 520),
) -> tuple[Path, list[SyntheticSample]]:
    """Write ``count`` PNGs plus a ``manifest.csv`` under ``out_dir``.

    Returns the manifest path and the per-sample generation parameters.
    Fully deterministic for a given seed.
    """
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    samples: list[SyntheticSample] = []
    for index in range(count):
        width = int(rng.integers(width_range[0], width_range[1] + 1))
        height = int(round(width * rng.uniform(1.2, 1.6)))
        brightness = float(rng.uniform(*BRIGHTNESS_RANGE))
        blur_sigma = float(rng.uniform(0.0, MAX_BLUR_SIGMA))

        pattern = _base_pattern(rng, height, width)
        # Blur strength is expressed at the fixed 416-wide network scale, so
        # the visible blur after resizing is comparable across source sizes.
        sigma_px = blur_sigma * width / 416.0
        if sigma_px > 0:
            pattern = gaussian_filter(pattern, sigma=sigma_px, mode="nearest")
        pattern = brightness + 0.25 * (pattern - pattern.mean())
        gains = rng.uniform(0.92, 1.08, size=3)
        rgb = np.clip(pattern[..., None] * gains, 0.0, 1.0)

        image_id = f"syn_{index:04d}"
        filename = f"{image_id}.png"
        Image.fromarray((rgb * 255.0).round().astype(np.uint8)).save(images_dir / filename)
        entry = ManifestEntry(
            image_id=image_id,
            path=images_dir / filename,
            mos=quality_label(brightness, blur_sigma),
        )
        samples.append(SyntheticSample(entry=entry, brightness=brightness, blur_sigma=blur_sigma))

    manifest_path = out_dir / "manifest.csv"
    with manifest_path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["image_id", "path", "mos"])
        for sample in samples:
            writer.writerow(
                [sample.entry.image_id, f"images/{sample.entry.path.name}", repr(sample.entry.mos)]
            )
    return manifest_path, samples
