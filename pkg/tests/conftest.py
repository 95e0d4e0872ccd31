"""Shared fixtures: tiny images, manifests, and session-scoped models."""

from __future__ import annotations

import numpy as np
import pytest
from PIL import Image

from faceq import ManifestEntry, build_model, default_specs, generate_synthetic_dataset


def write_image(path, width: int, height: int, kind: str = "gradient") -> None:
    """Write a small deterministic RGB test image.

    ``gradient`` ramps left-to-right and top-to-bottom (asymmetric under both
    flips); ``constant`` is all-zero.
    """
    if kind == "constant":
        arr = np.zeros((height, width, 3), dtype=np.uint8)
    elif kind == "gradient":
        xx = np.linspace(0, 200, width, dtype=np.float64)[None, :]
        yy = np.linspace(0, 55, height, dtype=np.float64)[:, None]
        arr = np.clip(xx + yy, 0, 255).astype(np.uint8)[..., None].repeat(3, axis=2)
    else:
        raise ValueError(kind)
    Image.fromarray(arr).save(path)


@pytest.fixture()
def entry_factory(tmp_path):
    """Create on-disk image entries for preprocessing tests."""

    def make(image_id: str, width: int, height: int, kind: str = "gradient", mos: float = 3.0):
        path = tmp_path / f"{image_id}.png"
        write_image(path, width, height, kind)
        return ManifestEntry(image_id=image_id, path=path, mos=mos)

    return make


@pytest.fixture(scope="session")
def built_models():
    """Both ensemble members, randomly initialized but deterministic."""
    return [build_model(spec) for spec in default_specs(pretrained=False)]


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """A 48-image synthetic labeled dataset shared by trainer/CLI tests."""
    root = tmp_path_factory.mktemp("smallset")
    manifest_path, samples = generate_synthetic_dataset(
        root, count=48, seed=5, width_range=(160, 256)
    )
    return manifest_path, samples
