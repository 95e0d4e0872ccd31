"""Training recipe: Adam with per-group learning rates, stepped decay,
correlation-aware loss, and best-checkpoint selection on validation score.

Each ensemble member trains independently but from the same split. All
randomness (init, dropout, shuffling) derives from (config.seed, backbone),
so a rerun reproduces checkpoints bit-for-bit and runs that differ only in
the loss weight share identical initialization and batch order.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .data import ManifestEntry, PreprocessedImage, SplitSpec, load_and_preprocess, split_dataset
from .errors import ConfigError, DataError, DivergedLoss, EmptyTrainSet
from .inference import TtaPolicy, default_policy, fuse_grid, make_views, no_tta_policy
from .losses import LossConfig, msecorr_loss
from .metrics import MetricsReport, final_score
from .models import (
    ModelSpec,
    QualityModel,
    build_model,
    default_specs,
    load_checkpoint,
    parameter_groups,
    predict_scores,
    save_checkpoint,
    stack_batch,
)

log = logging.getLogger(__name__)

ENSEMBLE_MANIFEST_NAME = "ensemble.json"
ALPHA_SWEEP_GRID = (0.0, 0.25, 0.5, 1.0)
BACKBONE_LR_SWEEP_GRID = (1.0, 0.5, 0.1, 0.05)


@dataclass(frozen=True)
class TrainConfig:
    """Every training hyperparameter, with the reference recipe as defaults."""

    base_lr: float = 5e-4
    backbone_lr_multiplier: float = 0.1
    weight_decay: float = 1e-4
    lr_step_epochs: int = 5
    lr_step_factor: float = 0.5
    batch_size: int = 64
    max_epochs: int = 30
    alpha: float = 0.5
    variance_epsilon: float = 1e-12
    seed: int = 0
    split: SplitSpec = field(default_factory=SplitSpec)
    tta_in_validation: bool = False
    pretrained: bool = False

    def validate(self) -> None:
        checks = [
            (self.base_lr > 0, "base_lr must be positive"),
            (0 < self.backbone_lr_multiplier <= 1, "backbone_lr_multiplier must be in (0, 1]"),
            (self.weight_decay >= 0, "weight_decay must be non-negative"),
            (self.lr_step_epochs >= 1, "lr_step_epochs must be >= 1"),
            (0 < self.lr_step_factor <= 1, "lr_step_factor must be in (0, 1]"),
            (self.batch_size >= 2, "batch_size must be >= 2 (batch correlation needs N >= 2)"),
            (self.max_epochs >= 1, "max_epochs must be >= 1"),
            (self.alpha >= 0, "alpha must be >= 0"),
            (self.variance_epsilon > 0, "variance_epsilon must be positive"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)

    def loss_config(self) -> LossConfig:
        return LossConfig(alpha=self.alpha, variance_epsilon=self.variance_epsilon)

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "split"}
        d["train_fraction"] = self.split.train_fraction
        d["split_seed"] = self.split.seed
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        split = SplitSpec(
            train_fraction=float(d.pop("train_fraction", 0.8)),
            seed=int(d.pop("split_seed", 0)),
        )
        known = {f for f in cls.__dataclass_fields__ if f != "split"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(split=split, **d)


def config_hash(config: TrainConfig) -> str:
    canonical = json.dumps(config.to_dict(), sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()[:12]


def learning_rate_at(epoch_index: int, config: TrainConfig) -> float:
    """Head-group learning rate during 0-based ``epoch_index``:
    base_lr * factor^(completed_steps)."""
    return config.base_lr * config.lr_step_factor ** (epoch_index // config.lr_step_epochs)


@dataclass
class TrainLogEntry:
    epoch: int  # 1-based
    train_loss: float
    val_srcc: float
    val_plcc: float
    val_final: float
    lr_current: float


@dataclass
class TrainResult:
    spec: ModelSpec
    checkpoint_path: Path
    best_epoch: int
    best_val_final: float
    log: list[TrainLogEntry]
    train_ids: list[str]
    val_ids: list[str]


class ImageStore:
    """Preprocessed-image cache keyed by image_id; holds float32 tensors in
    memory so repeated epochs skip decode+resize."""

    def __init__(self, cache: bool = True):
        self.cache = cache
        self._store: dict[str, PreprocessedImage] = {}

    def get(self, entry: ManifestEntry) -> PreprocessedImage:
        cached = self._store.get(entry.image_id)
        if cached is not None:
            return cached
        image = load_and_preprocess(entry)
        if self.cache:
            self._store[entry.image_id] = image
        return image


def _model_seed(config: TrainConfig, spec: ModelSpec) -> int:
    # Derived from (seed, backbone) only: runs differing in alpha share
    # identical init, dropout, and shuffle streams.
    return (config.seed * 1_000_003 + zlib.crc32(spec.backbone.value.encode())) % (2**63)


def _view_means(
    model: QualityModel, images: list[PreprocessedImage], policy: TtaPolicy, batch_size: int
) -> np.ndarray:
    """Per-image mean score over the policy's views, for one model."""
    per_view = np.stack(
        [
            predict_scores(
                model,
                [make_views(im, TtaPolicy((view,)))[0] for im in images],
                batch_size=batch_size,
            )
            for view in policy.views
        ]
    )
    return per_view.mean(axis=0)


def evaluate_models(
    models: list[QualityModel],
    entries: list[ManifestEntry],
    policy: TtaPolicy,
    store: ImageStore | None = None,
    batch_size: int = 8,
) -> MetricsReport:
    """Fused-score metrics for an ensemble over a labeled entry list."""
    store = store or ImageStore()
    images = [store.get(e) for e in entries]
    grids = np.stack(
        [
            np.stack(
                [
                    predict_scores(
                        model,
                        [make_views(im, TtaPolicy((view,)))[0] for im in images],
                        batch_size=batch_size,
                    )
                    for view in policy.views
                ],
                axis=1,
            )
            for model in models
        ],
        axis=1,
    )  # (n_images, M, T)
    fused = [fuse_grid(grid)[1] for grid in grids]
    return final_score(fused, [e.mos for e in entries])


def train_model(
    spec: ModelSpec,
    config: TrainConfig,
    train_entries: list[ManifestEntry],
    val_entries: list[ManifestEntry],
    out_dir: str | Path,
    store: ImageStore | None = None,
    checkpoint_name: str | None = None,
) -> TrainResult:
    """Fine-tune one model and keep the epoch with the best validation final
    score. Writes ``<backbone>.pt`` (+ JSON sidecar) and a per-epoch
    ``<backbone>_trainlog.csv`` under ``out_dir``.
    """
    config.validate()
    spec.validate()
    if not train_entries:
        raise EmptyTrainSet("no training entries")
    if not val_entries:
        raise DataError("no validation entries; best-checkpoint selection needs a held-out set")
    train_ids = [e.image_id for e in train_entries]
    val_ids = [e.image_id for e in val_entries]
    if set(train_ids) & set(val_ids):
        raise ConfigError("train and validation sets overlap")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    store = store or ImageStore()
    loss_config = config.loss_config()
    val_policy = default_policy() if config.tta_in_validation else no_tta_policy()

    seed = _model_seed(config, spec)
    torch.manual_seed(seed)  # dropout stream
    shuffle_rng = np.random.default_rng(seed ^ 0xA5A5A5)
    model = build_model(spec, init_seed=config.seed)
    groups = parameter_groups(model)
    optimizer = torch.optim.Adam(
        [
            {"params": groups["head"], "lr": config.base_lr},
            {"params": groups["backbone"], "lr": config.base_lr * config.backbone_lr_multiplier},
        ],
        lr=config.base_lr,
        weight_decay=config.weight_decay,
    )

    val_images = [store.get(e) for e in val_entries]
    val_mos = [e.mos for e in val_entries]

    train_log: list[TrainLogEntry] = []
    best_state: dict | None = None
    best_epoch = 0
    best_val_final = -float("inf")

    for epoch_index in range(config.max_epochs):
        head_lr = learning_rate_at(epoch_index, config)
        optimizer.param_groups[0]["lr"] = head_lr
        optimizer.param_groups[1]["lr"] = head_lr * config.backbone_lr_multiplier

        model.train()
        order = shuffle_rng.permutation(len(train_entries))
        loss_total = 0.0
        for batch_index, start in enumerate(range(0, len(order), config.batch_size)):
            chunk = [train_entries[i] for i in order[start : start + config.batch_size]]
            x = stack_batch([store.get(e) for e in chunk])
            targets = torch.tensor([e.mos for e in chunk], dtype=torch.float32)
            predictions = model(x)
            if not bool(torch.isfinite(predictions.detach()).all()):
                raise DivergedLoss(epoch_index + 1, batch_index)
            loss = msecorr_loss(predictions, targets, loss_config).value
            if not bool(torch.isfinite(loss.detach())):
                raise DivergedLoss(epoch_index + 1, batch_index)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            loss_total += float(loss.detach()) * len(chunk)

        val_scores = _view_means(model, val_images, val_policy, batch_size=8)
        report = final_score(val_scores, val_mos)
        entry = TrainLogEntry(
            epoch=epoch_index + 1,
            train_loss=loss_total / len(train_entries),
            val_srcc=report.srcc,
            val_plcc=report.plcc,
            val_final=report.final,
            lr_current=head_lr,
        )
        train_log.append(entry)
        log.info(
            "%s epoch %d/%d: loss %.4f, val final %.4f (lr %.2e)",
            spec.backbone.value,
            entry.epoch,
            config.max_epochs,
            entry.train_loss,
            entry.val_final,
            head_lr,
        )
        if report.final > best_val_final:
            best_val_final = report.final
            best_epoch = epoch_index + 1
            best_state = copy.deepcopy(model.state_dict())

    assert best_state is not None
    model.load_state_dict(best_state)
    name = checkpoint_name or spec.backbone.value
    checkpoint_path = save_checkpoint(
        model,
        out_dir / f"{name}.pt",
        epoch=best_epoch,
        config_hash=config_hash(config),
        extra={"best_val_final": best_val_final},
    )
    write_train_log(train_log, out_dir / f"{name}_trainlog.csv")
    return TrainResult(
        spec=spec,
        checkpoint_path=checkpoint_path,
        best_epoch=best_epoch,
        best_val_final=best_val_final,
        log=train_log,
        train_ids=train_ids,
        val_ids=val_ids,
    )


def write_train_log(log: list[TrainLogEntry], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["epoch", "train_loss", "val_srcc", "val_plcc", "val_final", "lr_current"])
        for entry in log:
            writer.writerow(
                [
                    entry.epoch,
                    repr(entry.train_loss),
                    repr(entry.val_srcc),
                    repr(entry.val_plcc),
                    repr(entry.val_final),
                    repr(entry.lr_current),
                ]
            )
    return path


@dataclass
class EnsembleResult:
    results: list[TrainResult]
    manifest_path: Path


def train_ensemble(
    config: TrainConfig,
    entries: list[ManifestEntry],
    out_dir: str | Path,
    specs: tuple[ModelSpec, ...] | None = None,
    store: ImageStore | None = None,
) -> EnsembleResult:
    """Train every ensemble member on one shared split and bind the
    checkpoints together with an ensemble manifest JSON."""
    config.validate()
    specs = specs or default_specs(pretrained=config.pretrained)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    store = store or ImageStore()
    train_entries, val_entries = split_dataset(entries, config.split)
    results = [
        train_model(spec, config, train_entries, val_entries, out_dir, store=store)
        for spec in specs
    ]
    manifest = {
        "format": "faceq-ensemble/1",
        "config_hash": config_hash(config),
        "models": [
            {
                "backbone": result.spec.backbone.value,
                "checkpoint": result.checkpoint_path.name,
                "best_epoch": result.best_epoch,
                "best_val_final": result.best_val_final,
            }
            for result in results
        ],
    }
    manifest_path = out_dir / ENSEMBLE_MANIFEST_NAME
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return EnsembleResult(results=results, manifest_path=manifest_path)


def load_ensemble(manifest_path: str | Path) -> list[QualityModel]:
    """Load every model named by an ensemble manifest, in manifest order."""
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise DataError(f"ensemble manifest not found: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    models = []
    for item in manifest["models"]:
        model, _ = load_checkpoint(manifest_path.parent / item["checkpoint"])
        models.append(model)
    return models


# --- ablation grid -------------------------------------------------------------


@dataclass
class AblationRow:
    name: str
    models: str
    loss: str
    tta: bool
    srcc: float
    plcc: float
    final: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class AblationReport:
    rows: list[AblationRow]

    def to_dict(self) -> dict:
        return {"rows": [row.to_dict() for row in self.rows]}


def run_ablation(
    config: TrainConfig,
    entries: list[ManifestEntry],
    out_dir: str | Path,
    store: ImageStore | None = None,
    sweep_alpha: bool = False,
    sweep_backbone_lr: bool = False,
) -> AblationReport:
    """Reproduce the component ablation: each model alone with plain MSE,
    their ensemble, the correlation-aware loss, and finally TTA.

    The last two rows share checkpoints and differ only in the TTA flag.
    Optional sweeps append ensemble rows across the alpha grid and the
    backbone-lr-multiplier grid (each sweep point retrains both models).
    """
    config.validate()
    out_dir = Path(out_dir)
    store = store or ImageStore()
    train_entries, val_entries = split_dataset(entries, config.split)
    mob_spec, shf_spec = default_specs(pretrained=config.pretrained)

    def train_pair(cfg: TrainConfig, subdir: str) -> list[QualityModel]:
        models = []
        for spec in (mob_spec, shf_spec):
            result = train_model(spec, cfg, train_entries, val_entries, out_dir / subdir, store=store)
            models.append(load_checkpoint(result.checkpoint_path)[0])
        return models

    def evaluated(name, models_used, loss_name, models, policy) -> AblationRow:
        report = evaluate_models(models, val_entries, policy, store=store)
        return AblationRow(
            name=name,
            models=models_used,
            loss=loss_name,
            tta=policy.count > 1,
            srcc=report.srcc,
            plcc=report.plcc,
            final=report.final,
        )

    plain = no_tta_policy()
    mse_config = replace(config, alpha=0.0)
    mse_models = train_pair(mse_config, "mse")
    corr_models = train_pair(config, "corr")
    alpha_label = f"msecorr(alpha={config.alpha})"

    rows = [
        evaluated("mobilenet_mse", "mobilenet", "mse", mse_models[:1], plain),
        evaluated("shufflenet_mse", "shufflenet", "mse", mse_models[1:], plain),
        evaluated("ensemble_mse", "mobilenet+shufflenet", "mse", mse_models, plain),
        evaluated("ensemble_msecorr", "mobilenet+shufflenet", alpha_label, corr_models, plain),
        evaluated("ensemble_msecorr_tta", "mobilenet+shufflenet", alpha_label, corr_models, default_policy()),
    ]

    if sweep_alpha:
        for alpha in ALPHA_SWEEP_GRID:
            swept = train_pair(replace(config, alpha=alpha), f"alpha_{alpha:g}")
            rows.append(
                evaluated(
                    f"ensemble_msecorr_alpha_{alpha:g}",
                    "mobilenet+shufflenet",
                    f"msecorr(alpha={alpha:g})",
                    swept,
                    plain,
                )
            )
    if sweep_backbone_lr:
        for multiplier in BACKBONE_LR_SWEEP_GRID:
            swept = train_pair(
                replace(config, backbone_lr_multiplier=multiplier), f"blr_{multiplier:g}"
            )
            rows.append(
                evaluated(
                    f"ensemble_backbone_lr_{multiplier:g}",
                    "mobilenet+shufflenet",
                    alpha_label,
                    swept,
                    plain,
                )
            )
    return AblationReport(rows=rows)
