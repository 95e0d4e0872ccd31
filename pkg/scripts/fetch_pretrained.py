#!/usr/bin/env python3
"""Download the ImageNet backbone checkpoints and convert them for faceq.

The core library never touches the network: `build_model(pretrained=True)`
only reads local files. This helper fetches the torchvision checkpoints
once and saves backbone-only state dicts into the weight cache directory
(default ~/.cache/faceq/weights, override with $FACEQ_WEIGHTS_DIR or
--weights-dir).
"""

from __future__ import annotations

import argparse

import torch
from torchvision.models import (
    MobileNet_V3_Small_Weights,
    ShuffleNet_V2_X0_5_Weights,
    mobilenet_v3_small,
    shufflenet_v2_x0_5,
)

from faceq.models import Backbone, pretrained_weights_path, resolve_weights_dir


def mobilenet_backbone_state() -> dict:
    tv = mobilenet_v3_small(weights=MobileNet_V3_Small_Weights.IMAGENET1K_V1)
    return {
        key.removeprefix("features."): value
        for key, value in tv.state_dict().items()
        if key.startswith("features.")
    }


def shufflenet_backbone_state() -> dict:
    tv = shufflenet_v2_x0_5(weights=ShuffleNet_V2_X0_5_Weights.IMAGENET1K_V1)
    return {key: value for key, value in tv.state_dict().items() if not key.startswith("fc.")}


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--weights-dir", default=None, help="target directory for weight files")
    args = parser.parse_args()

    weights_dir = resolve_weights_dir(args.weights_dir)
    weights_dir.mkdir(parents=True, exist_ok=True)
    for backbone, state_fn in (
        (Backbone.MOBILENET_V3_SMALL, mobilenet_backbone_state),
        (Backbone.SHUFFLENET_V2, shufflenet_backbone_state),
    ):
        target = pretrained_weights_path(backbone, weights_dir)
        torch.save(state_fn(), target)
        print(f"{backbone.value}: wrote {target}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
