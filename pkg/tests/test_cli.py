"""CLI contract: subcommands, exit codes, artifacts, idempotence."""

from __future__ import annotations

import csv
import json
import subprocess
import sys

import pytest
import yaml

from faceq import load_manifest
from faceq.cli import main


def write_subset_manifest(manifest_path, n, name="subset.csv"):
    """Trim a synthetic manifest to its first n rows (same directory, so
    relative image paths keep resolving)."""
    rows = manifest_path.read_text().splitlines()
    out = manifest_path.parent / name
    out.write_text("\n".join(rows[: n + 1]) + "\n")
    return out


def write_config(path, **overrides):
    settings = dict(
        base_lr=5e-4,
        backbone_lr_multiplier=1.0,
        batch_size=4,
        max_epochs=1,
        alpha=0.5,
        seed=9,
        train_fraction=0.75,
        split_seed=9,
    )
    settings.update(overrides)
    path.write_text(yaml.safe_dump(settings))
    return path


class TestParsingAndErrors:
    def test_dry_run_prints_config_and_touches_nothing(self, tmp_path, capsys):
        config = write_config(tmp_path / "cfg.yaml")
        code = main(["train", "--config", str(config), "--dry-run", "--out", str(tmp_path / "o")])
        assert code == 0
        printed = json.loads(capsys.readouterr().out)
        assert printed["resolved_train_config"]["batch_size"] == 4
        assert not (tmp_path / "o").exists()

    def test_missing_manifest_setting_is_config_error(self, tmp_path, capsys):
        config = write_config(tmp_path / "cfg.yaml")
        code = main(["train", "--config", str(config), "--out", str(tmp_path / "o")])
        assert code == 2
        assert "ERROR CONFIG_ERROR" in capsys.readouterr().err

    def test_nonexistent_manifest_file_is_data_error(self, tmp_path, capsys):
        config = write_config(tmp_path / "cfg.yaml")
        code = main(
            [
                "train",
                "--config",
                str(config),
                "--manifest",
                str(tmp_path / "missing.csv"),
                "--out",
                str(tmp_path / "o"),
            ]
        )
        assert code == 3
        assert "ERROR DATA_ERROR" in capsys.readouterr().err

    def test_nonexistent_config_file_is_config_error(self, tmp_path, capsys):
        code = main(["train", "--config", str(tmp_path / "none.yaml")])
        assert code == 2
        assert "ERROR CONFIG_ERROR" in capsys.readouterr().err

    def test_bad_config_value_is_config_error(self, tmp_path, capsys):
        config = write_config(tmp_path / "cfg.yaml", batch_size=1)
        code = main(["train", "--config", str(config), "--dry-run"])
        assert code == 2
        assert "ERROR CONFIG_ERROR" in capsys.readouterr().err

    def test_console_script_entry_point(self):
        out = subprocess.run(
            [sys.executable, "-m", "faceq.cli", "--help"], capture_output=True, text=True
        )
        assert out.returncode == 0
        for command in ("train", "predict", "evaluate", "ablate", "audit"):
            assert command in out.stdout


class TestAudit:
    def test_audit_reports_params_and_both_conventions(self, tmp_path, capsys):
        out_json = tmp_path / "audit.json"
        code = main(["audit", "--out", str(out_json)])
        assert code == 0
        stdout = capsys.readouterr().out
        assert "MAC_AS_ONE_FLOP" in stdout and "MAC_AS_TWO_FLOPS" in stdout
        audit = json.loads(out_json.read_text())
        assert audit["total_params"] == sum(audit["per_component_params"].values())
        assert set(audit["gflops_by_convention"]) == {"MAC_AS_ONE_FLOP", "MAC_AS_TWO_FLOPS"}
        assert audit["nearest_convention"] in audit["gflops_by_convention"]


class TestEvaluate:
    def test_predictions_equal_to_ground_truth_score_one(self, small_dataset, tmp_path, capsys):
        manifest_path, _ = small_dataset
        subset = write_subset_manifest(manifest_path, 6, "eval_subset.csv")
        entries = load_manifest(subset)
        predictions = tmp_path / "perfect.csv"
        with predictions.open("w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["image_id", "fused", "error"])
            for e in entries:
                writer.writerow([e.image_id, repr(e.mos), ""])
        out_json = tmp_path / "report.json"
        code = main(
            [
                "evaluate",
                "--predictions",
                str(predictions),
                "--manifest",
                str(subset),
                "--out",
                str(out_json),
            ]
        )
        assert code == 0
        stdout = capsys.readouterr().out
        assert "1.0000  " in stdout or stdout.count("1.0000") >= 3
        report = json.loads(out_json.read_text())
        assert report["srcc"] == pytest.approx(1.0, abs=1e-12)
        assert report["plcc"] == pytest.approx(1.0, abs=1e-12)
        assert report["final"] == pytest.approx(1.0, abs=1e-12)
        assert report["n"] == len(entries)


@pytest.fixture(scope="module")
def trained(small_dataset, tmp_path_factory):
    manifest_path, _ = small_dataset
    root = tmp_path_factory.mktemp("cli_e2e")
    subset = write_subset_manifest(manifest_path, 10, "cli_subset.csv")
    config = write_config(root / "cfg.yaml")
    out_dir = root / "run"
    code = main(
        [
            "train",
            "--config",
            str(config),
            "--manifest",
            str(subset),
            "--out",
            str(out_dir),
        ]
    )
    assert code == 0
    return subset, out_dir


class TestEndToEnd:
    def test_train_writes_checkpoints_and_snapshot(self, trained):
        _, out_dir = trained
        assert (out_dir / "ensemble.json").is_file()
        assert (out_dir / "config.json").is_file()
        assert (out_dir / "mobilenet_v3_small.pt").is_file()
        assert (out_dir / "shufflenet_v2.pt").is_file()
        assert (out_dir / "mobilenet_v3_small_trainlog.csv").is_file()

    def test_predict_then_evaluate(self, trained, tmp_path, capsys):
        subset, out_dir = trained
        pred_csv = tmp_path / "pred.csv"
        code = main(
            [
                "predict",
                "--checkpoints",
                str(out_dir / "ensemble.json"),
                "--manifest",
                str(subset),
                "--tta",
                "off",
                "--out",
                str(pred_csv),
            ]
        )
        assert code == 0
        with pred_csv.open() as handle:
            rows = list(csv.reader(handle))
        assert len(rows) == 1 + 10
        assert rows[0][:2] == ["image_id", "fused"]

        report_json = tmp_path / "metrics.json"
        code = main(
            [
                "evaluate",
                "--predictions",
                str(pred_csv),
                "--manifest",
                str(subset),
                "--out",
                str(report_json),
            ]
        )
        assert code == 0
        report = json.loads(report_json.read_text())
        assert set(report) == {"srcc", "plcc", "final", "n"}
        assert report["n"] == 10

    def test_predict_rerun_is_byte_identical(self, trained, tmp_path):
        subset, out_dir = trained
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        for target in (a, b):
            code = main(
                [
                    "predict",
                    "--checkpoints",
                    str(out_dir / "ensemble.json"),
                    "--manifest",
                    str(subset),
                    "--tta",
                    "off",
                    "--out",
                    str(target),
                ]
            )
            assert code == 0
        assert a.read_bytes() == b.read_bytes()

    def test_tta_flag_changes_column_count(self, trained, tmp_path):
        subset, out_dir = trained
        on, off = tmp_path / "on.csv", tmp_path / "off.csv"
        for target, flag in ((on, "on"), (off, "off")):
            assert (
                main(
                    [
                        "predict",
                        "--checkpoints",
                        str(out_dir / "ensemble.json"),
                        "--manifest",
                        str(subset),
                        "--tta",
                        flag,
                        "--out",
                        str(target),
                    ]
                )
                == 0
            )
        header_on = on.read_text().splitlines()[0].split(",")
        header_off = off.read_text().splitlines()[0].split(",")
        assert len(header_on) == 2 + 2 * (1 + 3) + 1
        assert len(header_off) == 2 + 2 * (1 + 1) + 1


class TestAblateCli:
    def test_five_row_report(self, small_dataset, tmp_path, capsys):
        manifest_path, _ = small_dataset
        subset = write_subset_manifest(manifest_path, 8, "ablate_subset.csv")
        config = write_config(tmp_path / "cfg.yaml")
        out_dir = tmp_path / "ablate"
        code = main(
            [
                "ablate",
                "--config",
                str(config),
                "--manifest",
                str(subset),
                "--out",
                str(out_dir),
            ]
        )
        assert code == 0
        report = json.loads((out_dir / "ablation_report.json").read_text())
        assert [row["name"] for row in report["rows"]] == [
            "mobilenet_mse",
            "shufflenet_mse",
            "ensemble_mse",
            "ensemble_msecorr",
            "ensemble_msecorr_tta",
        ]
        stdout = capsys.readouterr().out
        assert "ensemble_msecorr_tta" in stdout
