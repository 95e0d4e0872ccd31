"""Manifest ingestion, train/validation splitting, and image preprocessing.

A dataset is described by a CSV manifest with the exact header
``image_id,path,mos``. Relative image paths are resolved against the
manifest's own directory so a dataset folder can be moved as a unit.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import (
    DecodeFailure,
    DuplicateId,
    EmptyManifest,
    MalformedRow,
    MissingFile,
    NonFiniteScore,
    ZeroAreaImage,
)

MANIFEST_HEADER = ("image_id", "path", "mos")

# Network input resolution, (height, width).
TARGET_SIZE = (600, 416)

# Both backbones ship ImageNet-pretrained, so inputs are standardized with
# the ImageNet per-channel statistics after scaling to [0, 1].
IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


@dataclass(frozen=True)
class ManifestEntry:
    """One labeled sample: image path plus its ground-truth quality score."""

    image_id: str
    path: Path
    mos: float


@dataclass(frozen=True)
class SplitSpec:
    """Deterministic shuffled train/validation split."""

    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError(f"train_fraction must be in (0, 1), got {self.train_fraction}")


@dataclass
class PreprocessedImage:
    """Channel-standardized float32 pixels, shape (height, width, 3)."""

    pixels: np.ndarray
    source_id: str


def load_manifest(path: str | Path) -> list[ManifestEntry]:
    """Read a ``image_id,path,mos`` CSV into entries, preserving row order.

    Raises MissingFile, MalformedRow, DuplicateId, or NonFiniteScore.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"manifest not found: {path}")
    base = path.parent

    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    with path.open("r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise MalformedRow(1, "empty file, expected header image_id,path,mos") from None
        if tuple(h.strip() for h in header) != MANIFEST_HEADER:
            raise MalformedRow(1, f"expected header image_id,path,mos, got {','.join(header)!r}")
        for line_number, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 3:
                raise MalformedRow(line_number, f"expected 3 fields, got {len(row)}")
            image_id, raw_path, raw_mos = (field.strip() for field in row)
            if not image_id:
                raise MalformedRow(line_number, "empty image_id")
            if image_id in seen:
                raise DuplicateId(image_id)
            try:
                mos = float(raw_mos)
            except ValueError:
                raise MalformedRow(line_number, f"mos is not a number: {raw_mos!r}") from None
            if not math.isfinite(mos):
                raise NonFiniteScore(image_id)
            image_path = Path(raw_path)
            if not image_path.is_absolute():
                image_path = base / image_path
            seen.add(image_id)
            entries.append(ManifestEntry(image_id=image_id, path=image_path, mos=mos))
    return entries


def split_dataset(
    entries: list[ManifestEntry], spec: SplitSpec
) -> tuple[list[ManifestEntry], list[ManifestEntry]]:
    """Shuffle with ``spec.seed`` and partition into train/validation lists.

    The train size is round(train_fraction * N); together the two lists are a
    disjoint cover of the input. Deterministic for a given seed.
    """
    if not entries:
        raise EmptyManifest("cannot split an empty manifest")
    n = len(entries)
    n_train = int(round(spec.train_fraction * n))
    rng = np.random.default_rng(spec.seed)
    order = rng.permutation(n)
    train = [entries[i] for i in order[:n_train]]
    val = [entries[i] for i in order[n_train:]]
    return train, val


def load_and_preprocess(
    entry: ManifestEntry, target_size: tuple[int, int] = TARGET_SIZE
) -> PreprocessedImage:
    """Decode, resize to (height, width), scale to [0,1], and standardize.

    Resize is bilinear without aspect-ratio preservation. The function is
    pure: identical file bytes produce a bit-identical tensor.
    """
    height, width = target_size
    if height <= 0 or width <= 0:
        raise ZeroAreaImage(f"target size {target_size} has zero area")
    try:
        with Image.open(entry.path) as im:
            im = im.convert("RGB")
            if im.width == 0 or im.height == 0:
                raise ZeroAreaImage(f"source image {entry.image_id!r} has zero area")
            resized = im.resize((width, height), Image.BILINEAR)
    except ZeroAreaImage:
        raise
    except Exception as exc:  # PIL raises a zoo of types for bad files
        raise DecodeFailure(entry.image_id, str(exc)) from exc

    pixels = np.asarray(resized, dtype=np.float32) / 255.0
    pixels = (pixels - IMAGENET_MEAN) / IMAGENET_STD
    return PreprocessedImage(pixels=pixels, source_id=entry.image_id)
