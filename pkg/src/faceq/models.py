"""The two quality-regression networks: pretrained backbone + GAP + MLP head.

MobileNetV3-Small pools to a 576-dim feature and regresses through a single
288-wide hidden layer; ShuffleNetV2 pools to 1024 and goes through 512 then
256. Every hidden ReLU is followed by Dropout(0.2). The original ImageNet
classifiers are removed entirely; one adaptive average pool added here
produces the feature vector for both.
"""

from __future__ import annotations

import json
import os
import zlib
from collections import OrderedDict
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn
from torchvision.models import mobilenet_v3_small, shufflenet_v2_x0_5

from .data import TARGET_SIZE, PreprocessedImage
from .errors import InconsistentSpec, MissingFile, MissingPretrainedWeights, ShapeMismatch

WEIGHTS_DIR_ENV = "FACEQ_WEIGHTS_DIR"
DEFAULT_WEIGHTS_DIR = Path.home() / ".cache" / "faceq" / "weights"


class Backbone(str, Enum):
    MOBILENET_V3_SMALL = "mobilenet_v3_small"
    SHUFFLENET_V2 = "shufflenet_v2"


# Feature width after global average pooling, and the matching head widths.
_BACKBONE_TABLE = {
    Backbone.MOBILENET_V3_SMALL: {"feature_dim": 576, "head_widths": (288,)},
    Backbone.SHUFFLENET_V2: {"feature_dim": 1024, "head_widths": (512, 256)},
}

_WEIGHT_FILES = {
    Backbone.MOBILENET_V3_SMALL: "mobilenet_v3_small-imagenet-backbone.pt",
    Backbone.SHUFFLENET_V2: "shufflenet_v2_x0_5-imagenet-backbone.pt",
}

DROPOUT_RATE = 0.2


@dataclass(frozen=True)
class ModelSpec:
    """Identity and head layout of one ensemble member."""

    backbone: Backbone
    feature_dim: int
    head_widths: tuple[int, ...]
    dropout_rate: float = DROPOUT_RATE
    pretrained: bool = False

    def validate(self) -> None:
        expected = _BACKBONE_TABLE.get(self.backbone)
        if expected is None:
            raise InconsistentSpec(f"unknown backbone {self.backbone!r}")
        if self.feature_dim != expected["feature_dim"]:
            raise InconsistentSpec(
                f"{self.backbone.value} pools to {expected['feature_dim']} features, "
                f"spec says {self.feature_dim}"
            )
        if tuple(self.head_widths) != expected["head_widths"]:
            raise InconsistentSpec(
                f"{self.backbone.value} head widths must be {expected['head_widths']}, "
                f"spec says {tuple(self.head_widths)}"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise InconsistentSpec(f"dropout_rate out of range: {self.dropout_rate}")

    def to_dict(self) -> dict:
        return {
            "backbone": self.backbone.value,
            "feature_dim": self.feature_dim,
            "head_widths": list(self.head_widths),
            "dropout_rate": self.dropout_rate,
            "pretrained": self.pretrained,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            backbone=Backbone(d["backbone"]),
            feature_dim=int(d["feature_dim"]),
            head_widths=tuple(int(w) for w in d["head_widths"]),
            dropout_rate=float(d["dropout_rate"]),
            pretrained=bool(d["pretrained"]),
        )


def mobilenet_spec(pretrained: bool = False) -> ModelSpec:
    return ModelSpec(Backbone.MOBILENET_V3_SMALL, 576, (288,), DROPOUT_RATE, pretrained)


def shufflenet_spec(pretrained: bool = False) -> ModelSpec:
    return ModelSpec(Backbone.SHUFFLENET_V2, 1024, (512, 256), DROPOUT_RATE, pretrained)


def default_specs(pretrained: bool = False) -> tuple[ModelSpec, ModelSpec]:
    """The two-member ensemble, in its canonical order."""
    return (mobilenet_spec(pretrained), shufflenet_spec(pretrained))


def _make_backbone(kind: Backbone) -> nn.Module:
    if kind is Backbone.MOBILENET_V3_SMALL:
        return mobilenet_v3_small(weights=None).features
    # The x0.5 width keeps the 1024-wide GAP feature with the smallest
    # footprint, landing the two-model ensemble near 2M parameters total.
    tv = shufflenet_v2_x0_5(weights=None)
    return nn.Sequential(
        OrderedDict(
            conv1=tv.conv1,
            maxpool=tv.maxpool,
            stage2=tv.stage2,
            stage3=tv.stage3,
            stage4=tv.stage4,
            conv5=tv.conv5,
        )
    )


def _make_head(spec: ModelSpec) -> nn.Sequential:
    layers: list[nn.Module] = []
    width_in = spec.feature_dim
    for width in spec.head_widths:
        layers += [nn.Linear(width_in, width), nn.ReLU(), nn.Dropout(spec.dropout_rate)]
        width_in = width
    layers.append(nn.Linear(width_in, 1))
    return nn.Sequential(*layers)


class QualityModel(nn.Module):
    """Backbone + adaptive average pool + MLP head, scalar score per image."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        self.input_hw = TARGET_SIZE
        self.backbone = _make_backbone(spec.backbone)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = _make_head(spec)

    def features(self, x: Tensor) -> Tensor:
        return torch.flatten(self.pool(self.backbone(x)), 1)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeMismatch(f"expected (N, 3, H, W) input, got {tuple(x.shape)}")
        if tuple(x.shape[2:]) != self.input_hw:
            raise ShapeMismatch(
                f"expected {self.input_hw[0]}x{self.input_hw[1]} input, "
                f"got {x.shape[2]}x{x.shape[3]}"
            )
        return self.head(self.features(x)).squeeze(-1)


def _derived_seed(spec: ModelSpec, init_seed: int) -> int:
    return (init_seed * 1_000_003 + zlib.crc32(spec.backbone.value.encode())) % (2**63)


def resolve_weights_dir(weights_dir: str | Path | None = None) -> Path:
    if weights_dir is not None:
        return Path(weights_dir)
    env = os.environ.get(WEIGHTS_DIR_ENV)
    return Path(env) if env else DEFAULT_WEIGHTS_DIR


def pretrained_weights_path(backbone: Backbone, weights_dir: str | Path | None = None) -> Path:
    return resolve_weights_dir(weights_dir) / _WEIGHT_FILES[backbone]


def build_model(
    spec: ModelSpec,
    weights_dir: str | Path | None = None,
    init_seed: int = 0,
) -> QualityModel:
    """Construct a QualityModel deterministically.

    Head linears are re-initialized with uniform fan-in scaling and zero
    biases from a generator seeded by (backbone, init_seed), so repeated
    builds are identical regardless of global RNG state. With
    ``spec.pretrained`` the backbone state dict is loaded from a local file
    (see ``scripts/fetch_pretrained.py``); no network access is attempted.
    """
    spec.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(_derived_seed(spec, init_seed))
        model = QualityModel(spec)
        gen = torch.Generator().manual_seed(_derived_seed(spec, init_seed) ^ 0x5EED)
        for module in model.head:
            if isinstance(module, nn.Linear):
                bound = 1.0 / float(np.sqrt(module.in_features))
                with torch.no_grad():
                    module.weight.uniform_(-bound, bound, generator=gen)
                    module.bias.zero_()
    if spec.pretrained:
        weights_path = pretrained_weights_path(spec.backbone, weights_dir)
        if not weights_path.is_file():
            raise MissingPretrainedWeights(
                f"no weight file at {weights_path}; run scripts/fetch_pretrained.py "
                f"or set ${WEIGHTS_DIR_ENV}"
            )
        state = torch.load(weights_path, map_location="cpu", weights_only=True)
        model.backbone.load_state_dict(state)
    return model


def parameter_groups(model: QualityModel) -> dict[str, list[nn.Parameter]]:
    """Disjoint, exhaustive split of trainables into backbone and head."""
    groups = {
        "backbone": [p for p in model.backbone.parameters() if p.requires_grad],
        "head": [p for p in model.head.parameters() if p.requires_grad],
    }
    counted = sum(len(v) for v in groups.values())
    total = sum(1 for p in model.parameters() if p.requires_grad)
    if counted != total:
        raise ShapeMismatch("parameter partition is not exhaustive")
    return groups


def stack_batch(images: list[PreprocessedImage]) -> Tensor:
    """Stack HWC float32 images into an (N, 3, H, W) tensor."""
    if not images:
        raise ShapeMismatch("empty batch")
    arr = np.stack([im.pixels for im in images]).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr))


def predict_scores(
    model: QualityModel, images: list[PreprocessedImage], batch_size: int = 8
) -> np.ndarray:
    """Eval-mode scores for a list of images, batched for memory bounds."""
    was_training = model.training
    model.eval()
    outs: list[np.ndarray] = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            chunk = images[start : start + batch_size]
            outs.append(model(stack_batch(chunk)).detach().cpu().numpy().reshape(-1))
    if was_training:
        model.train()
    return np.concatenate(outs) if outs else np.empty(0, dtype=np.float32)


# --- checkpoint I/O -----------------------------------------------------------


def _sidecar_path(checkpoint_path: Path) -> Path:
    return checkpoint_path.with_suffix(".json")


def save_checkpoint(
    model: QualityModel,
    path: str | Path,
    epoch: int,
    config_hash: str,
    extra: dict | None = None,
) -> Path:
    """Write the named-tensor archive plus a JSON sidecar describing it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path)
    sidecar = {
        "spec": model.spec.to_dict(),
        "config_hash": config_hash,
        "epoch": epoch,
    }
    if extra:
        sidecar.update(extra)
    _sidecar_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path: str | Path) -> tuple[QualityModel, dict]:
    """Rebuild a model from a checkpoint and return it with its sidecar."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"checkpoint file not found: {path}")
    sidecar_path = _sidecar_path(path)
    if not sidecar_path.is_file():
        raise MissingFile(f"checkpoint sidecar not found: {sidecar_path}")
    sidecar = json.loads(sidecar_path.read_text())
    spec = ModelSpec.from_dict(sidecar["spec"])
    # Weights come from the archive, so the backbone is built uninitialized.
    model = build_model(
        ModelSpec(
            spec.backbone, spec.feature_dim, spec.head_widths, spec.dropout_rate, pretrained=False
        )
    )
    state = torch.load(path, map_location="cpu", weights_only=True)
    model.load_state_dict(state)
    model.eval()
    return model, sidecar
