"""Score fusion: per-model averaging over TTA views, then over models.

Views are deterministic transforms of the preprocessed tensor. Flips
commute with per-channel standardization, so flipping after preprocessing
equals flipping the source image first, at lower cost. Averaging uses
``math.fsum`` so the result is independent of view/model ordering.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .data import ManifestEntry, PreprocessedImage, load_and_preprocess
from .errors import DataError, EmptyEnsemble, ShapeMismatch
from .models import QualityModel, stack_batch

# Deterministic "slight color variation" view, available opt-in: a fixed
# per-channel gain/offset applied in standardized space.
_COLOR_GAIN = np.array([1.02, 1.0, 0.98], dtype=np.float32)
_COLOR_OFFSET = np.array([0.01, 0.0, -0.01], dtype=np.float32)

VIEW_TRANSFORMS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "identity": lambda px: px,
    "hflip": lambda px: px[:, ::-1, :].copy(),
    "vflip": lambda px: px[::-1, :, :].copy(),
    "color": lambda px: px * _COLOR_GAIN + _COLOR_OFFSET,
}

DEFAULT_VIEWS = ("identity", "hflip", "vflip")


@dataclass(frozen=True)
class TtaPolicy:
    """Ordered list of deterministic view transforms, by name."""

    views: tuple[str, ...] = DEFAULT_VIEWS

    def __post_init__(self):
        unknown = [v for v in self.views if v not in VIEW_TRANSFORMS]
        if unknown:
            raise ValueError(f"unknown view transforms: {unknown}; known: {sorted(VIEW_TRANSFORMS)}")
        if not self.views:
            raise ValueError("a TTA policy needs at least one view")

    @property
    def count(self) -> int:
        return len(self.views)


def default_policy() -> TtaPolicy:
    return TtaPolicy(DEFAULT_VIEWS)


def no_tta_policy() -> TtaPolicy:
    return TtaPolicy(("identity",))


def policy_from_flag(tta_on: bool) -> TtaPolicy:
    return default_policy() if tta_on else no_tta_policy()


@dataclass
class PredictionRecord:
    """Per-image fused score plus the full per-model x per-view grid."""

    image_id: str
    grid: np.ndarray  # (M, T)
    per_model: list[float]
    fused: float

    def validate(self) -> None:
        m, t = self.grid.shape
        for k in range(m):
            expected = math.fsum(float(v) for v in self.grid[k]) / t
            if abs(self.per_model[k] - expected) > 1e-12 * max(1.0, abs(expected)):
                raise ShapeMismatch(f"per_model[{k}] is not the mean of grid row {k}")
        expected_fused = math.fsum(self.per_model) / m
        if abs(self.fused - expected_fused) > 1e-12 * max(1.0, abs(expected_fused)):
            raise ShapeMismatch("fused is not the mean of per_model")


def make_views(image: PreprocessedImage, policy: TtaPolicy) -> list[PreprocessedImage]:
    """Apply each view transform; the first default view is the input itself."""
    return [
        PreprocessedImage(
            pixels=np.ascontiguousarray(VIEW_TRANSFORMS[name](image.pixels)),
            source_id=f"{image.source_id}#{name}",
        )
        for name in policy.views
    ]


def fuse_grid(grid: np.ndarray) -> tuple[list[float], float]:
    """Two-level mean of an (M, T) score grid: views first, then models.

    Sums use ``math.fsum`` (correctly rounded), so any permutation of views
    or models produces the identical fused value.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2 or grid.size == 0:
        raise ShapeMismatch(f"expected a non-empty (M, T) grid, got shape {grid.shape}")
    m, t = grid.shape
    per_model = [math.fsum(float(v) for v in grid[k]) / t for k in range(m)]
    fused = math.fsum(per_model) / m
    return per_model, fused


def ensemble_predict(
    models: Sequence[QualityModel],
    image: PreprocessedImage,
    policy: TtaPolicy = TtaPolicy(),
) -> PredictionRecord:
    """Score one image: every model scores every view, then two-level mean."""
    if not models:
        raise EmptyEnsemble("ensemble_predict needs at least one model")
    views = make_views(image, policy)
    batch = stack_batch(views)
    grid = np.empty((len(models), policy.count), dtype=np.float64)
    with torch.no_grad():
        for k, model in enumerate(models):
            model.eval()
            grid[k] = model(batch).detach().cpu().numpy().astype(np.float64)
    per_model, fused = fuse_grid(grid)
    return PredictionRecord(image_id=image.source_id, grid=grid, per_model=per_model, fused=fused)


def prediction_columns(n_models: int, n_views: int) -> list[str]:
    cols = ["image_id", "fused"]
    for k in range(1, n_models + 1):
        cols.append(f"model_{k}_mean")
        cols.extend(f"model_{k}_view_{t}" for t in range(1, n_views + 1))
    cols.append("error")
    return cols


def batch_predict(
    models: Sequence[QualityModel],
    entries: Sequence[ManifestEntry],
    policy: TtaPolicy,
    out_path: str | Path,
) -> list[PredictionRecord | None]:
    """Score a manifest into a CSV, one row per image in manifest order.

    An undecodable image gets its message in the ``error`` column and empty
    score cells; the remaining images are still scored. Output bytes are a
    pure function of checkpoints and inputs (full-precision floats).
    """
    if not models:
        raise EmptyEnsemble("batch_predict needs at least one model")
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    records: list[PredictionRecord | None] = []
    n_score_cells = 1 + len(models) * (1 + policy.count)
    with out_path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(prediction_columns(len(models), policy.count))
        for entry in entries:
            try:
                image = load_and_preprocess(entry)
            except DataError as exc:
                writer.writerow([entry.image_id] + [""] * n_score_cells + [str(exc)])
                records.append(None)
                continue
            record = ensemble_predict(models, image, policy)
            record.image_id = entry.image_id
            row: list[str] = [entry.image_id, repr(record.fused)]
            for k in range(len(models)):
                row.append(repr(record.per_model[k]))
                row.extend(repr(float(v)) for v in record.grid[k])
            row.append("")
            writer.writerow(row)
            records.append(record)
    return records


def read_predictions(path: str | Path) -> tuple[dict[str, float], list[str]]:
    """Load fused scores keyed by image_id; also return errored image ids."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"prediction file not found: {path}")
    fused: dict[str, float] = {}
    failed: list[str] = []
    with path.open("r", encoding="utf-8", newline="") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None or "image_id" not in reader.fieldnames or "fused" not in reader.fieldnames:
            raise DataError(f"{path} is not a prediction CSV (missing image_id/fused columns)")
        for row in reader:
            if row.get("error"):
                failed.append(row["image_id"])
            else:
                fused[row["image_id"]] = float(row["fused"])
    return fused, failed
