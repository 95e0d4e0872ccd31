"""Command-line entry point: train / predict / evaluate / ablate / audit.

A flat key/value YAML config file is the source of truth; command-line
flags override it. Exit codes: 0 success, 2 config error, 3 data error,
4 training divergence, 5 internal.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from pathlib import Path

import yaml

from .data import load_manifest
from .efficiency import audit_report, estimate_flops
from .errors import ConfigError, DataError, FaceqError
from .inference import batch_predict, policy_from_flag, read_predictions
from .metrics import final_score, round4
from .models import build_model, default_specs
from .trainer import (
    TrainConfig,
    config_hash,
    load_ensemble,
    run_ablation,
    train_ensemble,
)

log = logging.getLogger("faceq")

_CONFIG_PATH_KEYS = ("manifest", "out", "checkpoints", "predictions")


def load_config_file(path: str | Path) -> dict:
    """Read a flat key/value YAML mapping; missing file is a config error."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    loaded = yaml.safe_load(path.read_text())
    if loaded is None:
        return {}
    if not isinstance(loaded, dict):
        raise ConfigError(f"config file must be a flat key/value mapping: {path}")
    return loaded


def resolve_settings(args: argparse.Namespace) -> dict:
    """Merge defaults <- config file <- explicit CLI flags."""
    settings: dict = {}
    if getattr(args, "config", None):
        settings.update(load_config_file(args.config))
    for key in ("manifest", "out", "checkpoints", "predictions", "seed", "alpha", "tta"):
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    return settings


def build_train_config(settings: dict) -> TrainConfig:
    reserved = set(_CONFIG_PATH_KEYS) | {"tta"}
    config_keys = {k: v for k, v in settings.items() if k not in reserved}
    if "seed" in config_keys and "split_seed" not in config_keys:
        config_keys["split_seed"] = config_keys["seed"]
    try:
        config = TrainConfig.from_dict(config_keys)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad training config: {exc}") from exc
    config.validate()
    return config


def _require(settings: dict, key: str) -> str:
    value = settings.get(key)
    if not value:
        raise ConfigError(f"missing required setting {key!r} (flag --{key} or config file)")
    return value


def _tta_enabled(settings: dict, default: bool = True) -> bool:
    raw = settings.get("tta", "on" if default else "off")
    if isinstance(raw, bool):
        return raw
    if str(raw).lower() in ("on", "true", "1", "yes"):
        return True
    if str(raw).lower() in ("off", "false", "0", "no"):
        return False
    raise ConfigError(f"bad --tta value {raw!r}; expected on/off")


def _dry_run(settings: dict, extras: dict | None = None) -> int:
    resolved = dict(settings)
    if extras:
        resolved.update(extras)
    print(json.dumps(resolved, indent=2, sort_keys=True, default=str))
    return 0


def _print_metrics_table(report) -> None:
    print(f"{'SRCC':>8}  {'PLCC':>8}  {'Final Score':>12}")
    print(f"{round4(report.srcc):>8}  {round4(report.plcc):>8}  {round4(report.final):>12}")


def cmd_train(args: argparse.Namespace) -> int:
    settings = resolve_settings(args)
    config = build_train_config(settings)
    if args.dry_run:
        return _dry_run(settings, {"resolved_train_config": config.to_dict()})
    manifest = _require(settings, "manifest")
    out_dir = Path(_require(settings, "out"))
    entries = load_manifest(manifest)
    out_dir.mkdir(parents=True, exist_ok=True)
    snapshot = {"train_config": config.to_dict(), "config_hash": config_hash(config)}
    (out_dir / "config.json").write_text(json.dumps(snapshot, indent=2, sort_keys=True) + "\n")
    result = train_ensemble(config, entries, out_dir)
    for model_result in result.results:
        log.info(
            "%s: best epoch %d, val final %.4f",
            model_result.spec.backbone.value,
            model_result.best_epoch,
            model_result.best_val_final,
        )
    print(f"trained {len(result.results)} models -> {result.manifest_path}")
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    settings = resolve_settings(args)
    tta_on = _tta_enabled(settings, default=True)
    if args.dry_run:
        return _dry_run(settings, {"tta": "on" if tta_on else "off"})
    checkpoints = _require(settings, "checkpoints")
    manifest = _require(settings, "manifest")
    out_path = Path(_require(settings, "out"))
    models = load_ensemble(checkpoints)
    entries = load_manifest(manifest)
    policy = policy_from_flag(tta_on)
    records = batch_predict(models, entries, policy, out_path)
    scored = sum(1 for r in records if r is not None)
    print(f"scored {scored}/{len(records)} images -> {out_path}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    settings = resolve_settings(args)
    if args.dry_run:
        return _dry_run(settings)
    predictions_path = _require(settings, "predictions")
    manifest = _require(settings, "manifest")
    fused, failed = read_predictions(predictions_path)
    entries = load_manifest(manifest)
    pairs = [(fused[e.image_id], e.mos) for e in entries if e.image_id in fused]
    if len(pairs) < 2:
        raise DataError(
            f"only {len(pairs)} scored images overlap the manifest; need at least 2"
        )
    if failed:
        log.warning("%d images carried errors and were excluded", len(failed))
    report = final_score([p for p, _ in pairs], [g for _, g in pairs])
    _print_metrics_table(report)
    out = settings.get("out")
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    settings = resolve_settings(args)
    config = build_train_config(settings)
    if args.dry_run:
        return _dry_run(settings, {"resolved_train_config": config.to_dict()})
    manifest = _require(settings, "manifest")
    out_dir = Path(_require(settings, "out"))
    entries = load_manifest(manifest)
    report = run_ablation(
        config,
        entries,
        out_dir,
        sweep_alpha=args.sweep_alpha,
        sweep_backbone_lr=args.sweep_backbone_lr,
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / "ablation_report.json"
    report_path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"{'variant':<28} {'models':<24} {'loss':<22} {'tta':<4} "
          f"{'SRCC':>8}  {'PLCC':>8}  {'Final':>8}")
    for row in report.rows:
        print(
            f"{row.name:<28} {row.models:<24} {row.loss:<22} {str(row.tta).lower():<4} "
            f"{round4(row.srcc):>8}  {round4(row.plcc):>8}  {round4(row.final):>8}"
        )
    print(f"report -> {report_path}")
    return 0


def cmd_audit(args: argparse.Namespace) -> int:
    settings = resolve_settings(args)
    tta_on = _tta_enabled(settings, default=False)
    if args.dry_run:
        return _dry_run(settings, {"tta": "on" if tta_on else "off"})
    models = [build_model(spec) for spec in default_specs(pretrained=False)]
    report = estimate_flops(models, tta=tta_on)
    audit = audit_report(report)
    print(f"{'component':<40} {'params':>12}")
    for name, n in report.per_component_params.items():
        print(f"{name:<40} {n:>12,}")
    print(f"{'total':<40} {report.total_params:>12,}")
    print(
        f"params vs reference {audit['reference_total_params']:,}: "
        f"{audit['params_deviation_pct']:+.2f}%"
    )
    for convention, gflops in report.gflops_by_convention.items():
        marker = "  <- nearest reference" if convention == audit["nearest_convention"] else ""
        print(
            f"{convention}: {gflops:.4f} GFLOPs "
            f"({audit['gflops_deviation_pct'][convention]:+.2f}% vs {audit['reference_gflops']}){marker}"
        )
    out = settings.get("out")
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(json.dumps(audit, indent=2, sort_keys=True) + "\n")
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="faceq",
        description="Face image quality scoring: ensemble training, TTA inference, "
        "correlation metrics, and efficiency audits.",
    )
    parser.add_argument("--verbose", "-v", action="store_true", help="verbose logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser, *, tta: bool = False) -> None:
        p.add_argument("--config", help="flat key/value YAML config file")
        p.add_argument("--manifest", help="dataset manifest CSV (image_id,path,mos)")
        p.add_argument("--out", help="output file or directory")
        p.add_argument("--seed", type=int, help="override the training/split seed")
        p.add_argument("--alpha", type=float, help="correlation-loss balance weight")
        p.add_argument("--dry-run", action="store_true", help="print resolved config and exit")
        if tta:
            p.add_argument("--tta", choices=("on", "off"), help="test-time augmentation")

    p_train = sub.add_parser("train", help="train both ensemble members")
    add_common(p_train)
    p_train.set_defaults(func=cmd_train)

    p_predict = sub.add_parser("predict", help="score a manifest with a trained ensemble")
    add_common(p_predict, tta=True)
    p_predict.add_argument("--checkpoints", help="ensemble manifest JSON from training")
    p_predict.set_defaults(func=cmd_predict)

    p_eval = sub.add_parser("evaluate", help="SRCC/PLCC/final over a prediction CSV")
    add_common(p_eval)
    p_eval.add_argument("--predictions", help="prediction CSV from `faceq predict`")
    p_eval.set_defaults(func=cmd_evaluate)

    p_ablate = sub.add_parser("ablate", help="run the component ablation grid")
    add_common(p_ablate)
    p_ablate.add_argument("--sweep-alpha", action="store_true", help="sweep the loss weight grid")
    p_ablate.add_argument(
        "--sweep-backbone-lr", action="store_true", help="sweep the backbone lr multiplier grid"
    )
    p_ablate.set_defaults(func=cmd_ablate)

    p_audit = sub.add_parser("audit", help="parameter/FLOP budget report")
    add_common(p_audit, tta=True)
    p_audit.set_defaults(func=cmd_audit)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except FaceqError as exc:
        if args.verbose:
            traceback.print_exc()
        print(f"ERROR {exc.category}: {exc}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # noqa: BLE001 - single-line category for scripts
        if args.verbose:
            traceback.print_exc()
        print(f"ERROR INTERNAL: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
