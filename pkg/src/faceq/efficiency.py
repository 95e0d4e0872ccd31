"""Parameter and FLOP auditing for the ensemble.

MACs are counted layer-by-layer from a traced forward pass (convolutions
and linears); pooling contributes its additions as non-MAC FLOPs.
Normalization, activations, and dropout count as zero by convention. The
reported GFLOPs figure depends on whether a multiply-accumulate counts as
one FLOP or two, so both conventions are always reported side by side.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from enum import Enum

import torch
from torch import nn

from .errors import EmptyEnsemble
from .models import QualityModel, parameter_groups

# Published footprint of the reference two-model design; the audit reports
# percentage deviation from these rather than asserting either convention.
REFERENCE_TOTAL_PARAMS = 2_000_000
REFERENCE_GFLOPS = 0.4985


class MacConvention(str, Enum):
    MAC_AS_ONE_FLOP = "MAC_AS_ONE_FLOP"
    MAC_AS_TWO_FLOPS = "MAC_AS_TWO_FLOPS"


# Cheap elementwise/bookkeeping layers, zero-cost under both conventions.
_ZERO_COST_LAYERS = (
    nn.BatchNorm1d,
    nn.BatchNorm2d,
    nn.ReLU,
    nn.ReLU6,
    nn.Hardswish,
    nn.Hardsigmoid,
    nn.SiLU,
    nn.Sigmoid,
    nn.Dropout,
    nn.Identity,
    nn.Flatten,
)


@dataclass
class LayerCost:
    name: str
    kind: str
    macs: int
    other_flops: int


@dataclass
class EfficiencyReport:
    """Exact parameter counts plus the per-sample FLOP estimate."""

    per_component_params: dict[str, int]
    total_params: int
    flops_per_sample: float  # GFLOPs under `convention`
    convention: MacConvention
    gflops_by_convention: dict[str, float]
    macs_per_sample: int
    other_flops_per_sample: int
    tta_views: int
    layers: list[LayerCost] = field(default_factory=list)
    unsupported_layers: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "per_component_params": dict(self.per_component_params),
            "total_params": self.total_params,
            "flops_per_sample": self.flops_per_sample,
            "convention": self.convention.value,
            "gflops_by_convention": dict(self.gflops_by_convention),
            "macs_per_sample": self.macs_per_sample,
            "other_flops_per_sample": self.other_flops_per_sample,
            "tta_views": self.tta_views,
            "unsupported_layers": list(self.unsupported_layers),
        }


def count_params(model: QualityModel) -> dict[str, int]:
    """Exact trainable-parameter counts for the backbone and head groups."""
    groups = parameter_groups(model)
    return {name: sum(p.numel() for p in params) for name, params in groups.items()}


def _kernel_elems(kernel_size) -> int:
    if isinstance(kernel_size, int):
        return kernel_size * kernel_size
    k = 1
    for dim in kernel_size:
        k *= dim
    return k


def _layer_cost(name: str, module: nn.Module, inputs, output) -> LayerCost | None:
    if isinstance(module, nn.Conv2d):
        out_numel = output.numel()
        per_position = (module.in_channels // module.groups) * _kernel_elems(module.kernel_size)
        return LayerCost(name, "conv2d", macs=out_numel * per_position, other_flops=0)
    if isinstance(module, nn.Linear):
        rows = output.numel() // module.out_features
        return LayerCost(name, "linear", macs=rows * module.in_features * module.out_features, other_flops=0)
    if isinstance(module, (nn.MaxPool2d, nn.AvgPool2d)):
        ops = output.numel() * _kernel_elems(module.kernel_size)
        return LayerCost(name, "pool", macs=0, other_flops=ops)
    if isinstance(module, (nn.AdaptiveAvgPool2d, nn.AdaptiveMaxPool2d)):
        # Every input element enters one output cell's reduction.
        return LayerCost(name, "pool", macs=0, other_flops=inputs[0].numel())
    return None


def trace_layer_costs(
    model: nn.Module, input_shape: tuple[int, int, int]
) -> tuple[list[LayerCost], list[str]]:
    """Run one dummy forward and collect per-leaf-layer operation counts.

    Unrecognized leaf layer types are named in the returned warning list and
    counted as zero.
    """
    costs: list[LayerCost] = []
    unsupported: list[str] = []
    hooks = []

    def make_hook(name: str, module: nn.Module):
        def hook(mod, inputs, output):
            cost = _layer_cost(name, mod, inputs, output)
            if cost is not None:
                costs.append(cost)
            elif not isinstance(mod, _ZERO_COST_LAYERS):
                unsupported.append(f"{name} ({type(mod).__name__})")

        return module.register_forward_hook(hook)

    for name, module in model.named_modules():
        if next(module.children(), None) is None:  # leaf modules only
            hooks.append(make_hook(name, module))
    try:
        was_training = model.training
        model.eval()
        with torch.no_grad():
            model(torch.zeros((1, *input_shape)))
        if was_training:
            model.train()
    finally:
        for h in hooks:
            h.remove()
    for entry in unsupported:
        warnings.warn(f"unsupported layer counted as zero FLOPs: {entry}", stacklevel=2)
    return costs, unsupported


def estimate_flops(
    models: list[QualityModel],
    input_hw: tuple[int, int] = (600, 416),
    tta: bool = False,
    tta_views: int = 3,
    reference_gflops: float | None = REFERENCE_GFLOPS,
) -> EfficiencyReport:
    """Audit one fused forward pass (all models, one image) at ``input_hw``.

    With ``tta`` the per-sample cost covers all ``tta_views`` views. The
    convention put forward is the one landing nearer ``reference_gflops``;
    both totals are always present in ``gflops_by_convention``.
    """
    if not models:
        raise EmptyEnsemble("estimate_flops needs at least one model")
    views = tta_views if tta else 1
    all_costs: list[LayerCost] = []
    all_unsupported: list[str] = []
    per_component: dict[str, int] = {}
    for index, model in enumerate(models, start=1):
        prefix = f"model_{index}_{model.spec.backbone.value}"
        costs, unsupported = trace_layer_costs(model, (3, *input_hw))
        all_costs.extend(LayerCost(f"{prefix}.{c.name}", c.kind, c.macs, c.other_flops) for c in costs)
        all_unsupported.extend(f"{prefix}.{u}" for u in unsupported)
        for component, n in count_params(model).items():
            per_component[f"{prefix}.{component}"] = n

    macs = sum(c.macs for c in all_costs) * views
    other = sum(c.other_flops for c in all_costs) * views
    by_convention = {
        MacConvention.MAC_AS_ONE_FLOP.value: (macs + other) / 1e9,
        MacConvention.MAC_AS_TWO_FLOPS.value: (2 * macs + other) / 1e9,
    }
    if reference_gflops is None:
        convention = MacConvention.MAC_AS_ONE_FLOP
    else:
        convention = min(
            MacConvention,
            key=lambda conv: abs(by_convention[conv.value] - reference_gflops),
        )
    return EfficiencyReport(
        per_component_params=per_component,
        total_params=sum(per_component.values()),
        flops_per_sample=by_convention[convention.value],
        convention=convention,
        gflops_by_convention=by_convention,
        macs_per_sample=macs,
        other_flops_per_sample=other,
        tta_views=views,
        layers=all_costs,
        unsupported_layers=all_unsupported,
    )


def audit_report(report: EfficiencyReport) -> dict:
    """Reference comparison for the CLI/JSON output: percentage deviations
    from the published parameter and GFLOP budgets."""
    deviations = {
        name: (gflops - REFERENCE_GFLOPS) / REFERENCE_GFLOPS * 100.0
        for name, gflops in report.gflops_by_convention.items()
    }
    return {
        **report.to_dict(),
        "reference_total_params": REFERENCE_TOTAL_PARAMS,
        "params_deviation_pct": (report.total_params - REFERENCE_TOTAL_PARAMS)
        / REFERENCE_TOTAL_PARAMS
        * 100.0,
        "reference_gflops": REFERENCE_GFLOPS,
        "gflops_deviation_pct": deviations,
        "nearest_convention": report.convention.value,
    }
