"""faceq: lightweight face image quality scoring.

A two-model CNN ensemble (MobileNetV3-Small + ShuffleNetV2) trained with a
correlation-aware loss, scored with test-time-augmentation fusion,
evaluated by SRCC/PLCC, and audited for parameter/FLOP budgets.
"""

from .data import (
    IMAGENET_MEAN,
    IMAGENET_STD,
    TARGET_SIZE,
    ManifestEntry,
    PreprocessedImage,
    SplitSpec,
    load_and_preprocess,
    load_manifest,
    split_dataset,
)
from .efficiency import (
    EfficiencyReport,
    MacConvention,
    audit_report,
    count_params,
    estimate_flops,
)
from .inference import (
    PredictionRecord,
    TtaPolicy,
    batch_predict,
    default_policy,
    ensemble_predict,
    fuse_grid,
    make_views,
    no_tta_policy,
)
from .losses import (
    LossConfig,
    LossValue,
    corr_loss,
    mse_loss,
    msecorr_loss,
    msecorr_value_and_grad,
    pearson,
)
from .metrics import MetricsReport, final_score, plcc, round4, srcc
from .models import (
    Backbone,
    ModelSpec,
    QualityModel,
    build_model,
    default_specs,
    load_checkpoint,
    mobilenet_spec,
    parameter_groups,
    predict_scores,
    save_checkpoint,
    shufflenet_spec,
    stack_batch,
)
from .synthetic import generate_synthetic_dataset, quality_label
from .trainer import (
    AblationReport,
    AblationRow,
    EnsembleResult,
    ImageStore,
    TrainConfig,
    TrainLogEntry,
    TrainResult,
    config_hash,
    evaluate_models,
    learning_rate_at,
    load_ensemble,
    run_ablation,
    train_ensemble,
    train_model,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
