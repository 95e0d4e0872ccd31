"""Training recipe: schedule, determinism, artifacts, ablation grid."""

from __future__ import annotations

import json

import numpy as np
import pytest
from PIL import Image

from faceq import (
    ImageStore,
    SplitSpec,
    TrainConfig,
    config_hash,
    evaluate_models,
    learning_rate_at,
    load_checkpoint,
    load_manifest,
    no_tta_policy,
    run_ablation,
    shufflenet_spec,
    train_ensemble,
    train_model,
)
from faceq.data import ManifestEntry
from faceq.errors import ConfigError, DivergedLoss, EmptyTrainSet

FAST = dict(
    base_lr=5e-4,
    backbone_lr_multiplier=1.0,
    weight_decay=1e-4,
    batch_size=4,
    max_epochs=2,
    alpha=0.5,
    seed=9,
    split=SplitSpec(0.75, 9),
)


def subset(manifest_path, n):
    return load_manifest(manifest_path)[:n]


class TestTrainConfig:
    def test_defaults_follow_reference_recipe(self):
        config = TrainConfig()
        assert config.base_lr == 5e-4
        assert config.weight_decay == 1e-4
        assert config.lr_step_epochs == 5
        assert config.lr_step_factor == 0.5
        assert config.batch_size == 64
        assert config.max_epochs == 30
        assert config.split.train_fraction == 0.8

    def test_batch_size_one_rejected(self):
        with pytest.raises(ConfigError, match="batch_size"):
            TrainConfig(batch_size=1).validate()

    def test_bad_values_rejected(self):
        with pytest.raises(ConfigError):
            TrainConfig(base_lr=0.0).validate()
        with pytest.raises(ConfigError):
            TrainConfig(backbone_lr_multiplier=0.0).validate()
        with pytest.raises(ConfigError):
            TrainConfig(lr_step_factor=1.5).validate()

    def test_dict_roundtrip(self):
        config = TrainConfig(**FAST)
        assert TrainConfig.from_dict(config.to_dict()) == config

    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigError, match="unknown config keys"):
            TrainConfig.from_dict({"learning_rate": 1e-3})

    def test_hash_tracks_content(self):
        a = TrainConfig(**FAST)
        b = TrainConfig(**{**FAST, "alpha": 0.25})
        assert config_hash(a) == config_hash(TrainConfig(**FAST))
        assert config_hash(a) != config_hash(b)


class TestLearningRateSchedule:
    def test_step_decay_values(self):
        config = TrainConfig(base_lr=5e-4, lr_step_factor=0.5, lr_step_epochs=5)
        # 0-based epoch indices; the 11th epoch (index 10) has decayed twice.
        assert learning_rate_at(0, config) == 5e-4
        assert learning_rate_at(4, config) == 5e-4
        assert learning_rate_at(5, config) == 2.5e-4
        assert learning_rate_at(10, config) == pytest.approx(1.25e-4)

    def test_closed_form(self):
        config = TrainConfig(base_lr=1e-3, lr_step_factor=0.3, lr_step_epochs=2)
        for epoch in range(12):
            expected = 1e-3 * 0.3 ** (epoch // 2)
            assert learning_rate_at(epoch, config) == pytest.approx(expected)


class TestTrainModel:
    def test_empty_train_set_rejected(self, small_dataset, tmp_path):
        manifest_path, _ = small_dataset
        entries = subset(manifest_path, 4)
        with pytest.raises(EmptyTrainSet):
            train_model(shufflenet_spec(), TrainConfig(**FAST), [], entries, tmp_path)

    def test_overlapping_splits_rejected(self, small_dataset, tmp_path):
        manifest_path, _ = small_dataset
        entries = subset(manifest_path, 6)
        with pytest.raises(ConfigError, match="overlap"):
            train_model(shufflenet_spec(), TrainConfig(**FAST), entries, entries[:2], tmp_path)

    def test_artifacts_log_and_schedule(self, small_dataset, tmp_path):
        manifest_path, _ = small_dataset
        entries = subset(manifest_path, 16)
        config = TrainConfig(**{**FAST, "max_epochs": 3, "lr_step_epochs": 2})
        store = ImageStore()
        result = train_model(
            shufflenet_spec(), config, entries[:12], entries[12:], tmp_path, store=store
        )
        assert result.checkpoint_path.is_file()
        assert result.checkpoint_path.with_suffix(".json").is_file()
        assert (tmp_path / "shufflenet_v2_trainlog.csv").is_file()
        epochs = [entry.epoch for entry in result.log]
        assert epochs == [1, 2, 3]  # strictly increasing, one per epoch
        for entry in result.log:
            assert entry.lr_current == learning_rate_at(entry.epoch - 1, config)
        assert set(result.train_ids).isdisjoint(result.val_ids)
        assert 1 <= result.best_epoch <= 3
        sidecar = json.loads(result.checkpoint_path.with_suffix(".json").read_text())
        assert sidecar["epoch"] == result.best_epoch
        assert sidecar["config_hash"] == config_hash(config)

    def test_huge_targets_diverge_loudly(self, small_dataset, tmp_path):
        manifest_path, _ = small_dataset
        entries = subset(manifest_path, 8)
        # 1e30 is finite in float32 but its squared error overflows to inf.
        blown = [ManifestEntry(e.image_id, e.path, 1e30) for e in entries]
        with pytest.raises(DivergedLoss):
            train_model(
                shufflenet_spec(), TrainConfig(**FAST), blown[:6], blown[6:], tmp_path
            )

    def test_tta_in_validation_flag_runs(self, small_dataset, tmp_path):
        manifest_path, _ = small_dataset
        entries = subset(manifest_path, 8)
        config = TrainConfig(**{**FAST, "max_epochs": 1, "tta_in_validation": True})
        result = train_model(shufflenet_spec(), config, entries[:6], entries[6:], tmp_path)
        assert len(result.log) == 1


class TestEnsembleAndReproducibility:
    def test_two_checkpoints_and_manifest(self, small_dataset, tmp_path):
        manifest_path, _ = small_dataset
        entries = subset(manifest_path, 12)
        config = TrainConfig(**{**FAST, "max_epochs": 1})
        result = train_ensemble(config, entries, tmp_path / "run")
        assert len(result.results) == 2
        manifest = json.loads(result.manifest_path.read_text())
        assert [m["backbone"] for m in manifest["models"]] == [
            "mobilenet_v3_small",
            "shufflenet_v2",
        ]
        for item in manifest["models"]:
            assert (tmp_path / "run" / item["checkpoint"]).is_file()
        assert manifest["config_hash"] == config_hash(config)

    def test_identical_seeds_reproduce_training_bitwise(self, small_dataset, tmp_path):
        manifest_path, _ = small_dataset
        entries = subset(manifest_path, 10)
        config = TrainConfig(**{**FAST, "max_epochs": 2})
        store = ImageStore()
        first = train_model(
            shufflenet_spec(), config, entries[:8], entries[8:], tmp_path / "a", store=store
        )
        second = train_model(
            shufflenet_spec(), config, entries[:8], entries[8:], tmp_path / "b", store=store
        )
        assert first.checkpoint_path.read_bytes() == second.checkpoint_path.read_bytes()
        assert (tmp_path / "a" / "shufflenet_v2_trainlog.csv").read_bytes() == (
            tmp_path / "b" / "shufflenet_v2_trainlog.csv"
        ).read_bytes()
        assert [e.__dict__ for e in first.log] == [e.__dict__ for e in second.log]


class TestAblation:
    def test_five_rows_alpha_zero_equality_and_tta_pairing(self, small_dataset, tmp_path):
        manifest_path, _ = small_dataset
        entries = subset(manifest_path, 12)
        config = TrainConfig(**{**FAST, "max_epochs": 1, "alpha": 0.0})
        store = ImageStore()
        report = run_ablation(config, entries, tmp_path / "ablate", store=store)
        names = [row.name for row in report.rows]
        assert names == [
            "mobilenet_mse",
            "shufflenet_mse",
            "ensemble_mse",
            "ensemble_msecorr",
            "ensemble_msecorr_tta",
        ]
        mse_row, corr_row, tta_row = report.rows[2], report.rows[3], report.rows[4]
        # alpha = 0 reduces the joint loss to plain MSE: identical training.
        assert abs(corr_row.srcc - mse_row.srcc) <= 1e-9
        assert abs(corr_row.plcc - mse_row.plcc) <= 1e-9
        assert abs(corr_row.final - mse_row.final) <= 1e-9
        # the TTA row reuses the corr checkpoints; only the flag moves.
        assert not corr_row.tta and tta_row.tta
        assert tta_row.loss == corr_row.loss and tta_row.models == corr_row.models
        mse_ckpt = (tmp_path / "ablate" / "mse" / "mobilenet_v3_small.pt").read_bytes()
        corr_ckpt = (tmp_path / "ablate" / "corr" / "mobilenet_v3_small.pt").read_bytes()
        assert mse_ckpt == corr_ckpt

    def test_sweeps_append_rows(self, small_dataset, tmp_path, monkeypatch):
        import faceq.trainer as trainer_module

        monkeypatch.setattr(trainer_module, "ALPHA_SWEEP_GRID", (0.0, 0.5))
        monkeypatch.setattr(trainer_module, "BACKBONE_LR_SWEEP_GRID", (0.1,))
        manifest_path, _ = small_dataset
        entries = subset(manifest_path, 8)
        config = TrainConfig(**{**FAST, "max_epochs": 1})
        report = run_ablation(
            config,
            entries,
            tmp_path / "sweep",
            store=ImageStore(),
            sweep_alpha=True,
            sweep_backbone_lr=True,
        )
        names = [row.name for row in report.rows]
        assert names[5:] == [
            "ensemble_msecorr_alpha_0",
            "ensemble_msecorr_alpha_0.5",
            "ensemble_backbone_lr_0.1",
        ]


class TestOverfitSmoke:
    def test_brightness_labels_are_learnable(self, tmp_path):
        """32 samples whose score is a linear map of mean brightness: the
        model must fit its own training set (final > 0.95) within 20 epochs.
        """
        rng = np.random.default_rng(2)
        images_dir = tmp_path / "img"
        images_dir.mkdir()
        entries = []
        for i in range(32):
            brightness = 0.15 + 0.7 * i / 31
            base = rng.normal(0, 1, size=(240, 180))
            arr = np.clip(brightness + 0.12 * (base - base.mean()), 0, 1)
            rgb = (arr[..., None].repeat(3, axis=2) * 255).round().astype(np.uint8)
            path = images_dir / f"b{i:02d}.png"
            Image.fromarray(rgb).save(path)
            entries.append(ManifestEntry(f"b{i:02d}", path, 2.0 * brightness + 1.0))

        order = np.random.default_rng(1).permutation(32)
        train_entries = [entries[i] for i in order[:26]]
        val_entries = [entries[i] for i in order[26:]]
        config = TrainConfig(
            base_lr=1e-3,
            backbone_lr_multiplier=1.0,
            weight_decay=1e-4,
            batch_size=8,
            max_epochs=20,
            alpha=0.5,
            seed=1,
            split=SplitSpec(0.8, 1),
        )
        store = ImageStore()
        result = train_model(
            shufflenet_spec(), config, train_entries, val_entries, tmp_path / "run", store=store
        )
        model = load_checkpoint(result.checkpoint_path)[0]
        report = evaluate_models([model], train_entries, no_tta_policy(), store=store)
        assert report.final > 0.95
