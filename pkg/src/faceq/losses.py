"""Training objective: MSE plus a weighted Pearson-correlation penalty.

All functions accept torch tensors (gradients flow through) or any
array-like, which is converted to a float64 tensor. The correlation is
computed over the mini-batch, the only granularity available during SGD.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

from .errors import LengthMismatch, NonFiniteInput


@dataclass(frozen=True)
class LossConfig:
    """Balance weight and degeneracy guard for the joint loss.

    ``variance_epsilon`` is added inside each square root of the correlation
    denominator and doubles as the degeneracy threshold on the per-batch
    mean squared deviation. It is kept tiny (1e-12) so that non-degenerate
    correlations are unbiased to well below 1e-9.
    """

    alpha: float = 0.5
    variance_epsilon: float = 1e-12

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.variance_epsilon <= 0:
            raise ValueError(f"variance_epsilon must be > 0, got {self.variance_epsilon}")


@dataclass
class LossValue:
    """Joint loss result; ``degenerate`` is set when the correlation term was
    dropped (batch of one, or near-constant predictions/targets)."""

    value: Tensor
    degenerate: bool

    def item(self) -> float:
        return float(self.value.detach())


def _as_vector(x, name: str) -> Tensor:
    if isinstance(x, Tensor):
        t = x
    else:
        t = torch.as_tensor(np.asarray(x, dtype=np.float64))
    t = t.reshape(-1)
    if not bool(torch.isfinite(t.detach()).all()):
        raise NonFiniteInput(f"{name} contains NaN or Inf")
    return t


def _paired(predicted, target) -> tuple[Tensor, Tensor]:
    p = _as_vector(predicted, "predicted")
    t = _as_vector(target, "target")
    if p.numel() != t.numel():
        raise LengthMismatch(f"predicted has {p.numel()} entries, target has {t.numel()}")
    if p.numel() == 0:
        raise LengthMismatch("empty batch")
    return p, t


def mse_loss(predicted, target) -> Tensor:
    """Mean squared error, (1/N) * sum((q - q_hat)^2)."""
    p, t = _paired(predicted, target)
    return torch.mean((t - p) ** 2)


def pearson(predicted, target, variance_epsilon: float = LossConfig.variance_epsilon) -> Tensor:
    """Pearson correlation with ``variance_epsilon`` added inside each
    square root of the denominator, so constant batches stay finite."""
    p, t = _paired(predicted, target)
    if p.numel() < 2:
        raise LengthMismatch("correlation needs at least 2 samples")
    pd = p - p.mean()
    td = t - t.mean()
    denom = torch.sqrt(torch.sum(pd * pd) + variance_epsilon) * torch.sqrt(
        torch.sum(td * td) + variance_epsilon
    )
    return torch.sum(pd * td) / denom


def corr_loss(predicted, target, variance_epsilon: float = LossConfig.variance_epsilon) -> Tensor:
    """1 - Pearson: 0 at perfect positive correlation, 2 at perfect negative."""
    return 1.0 - pearson(predicted, target, variance_epsilon)


def is_degenerate(predicted, target, variance_epsilon: float = LossConfig.variance_epsilon) -> bool:
    """True when either batch has mean squared deviation below the guard."""
    p, t = _paired(predicted, target)
    n = p.numel()
    if n < 2:
        return True
    with torch.no_grad():
        var_p = torch.mean((p - p.mean()) ** 2)
        var_t = torch.mean((t - t.mean()) ** 2)
    return bool(var_p < variance_epsilon or var_t < variance_epsilon)


def msecorr_loss(predicted, target, config: LossConfig = LossConfig()) -> LossValue:
    """Joint loss L = L_MSE + alpha * (1 - Pearson).

    On a degenerate batch (N = 1 or near-zero variance on either side) the
    correlation term is dropped and ``degenerate`` is flagged; the MSE term
    is always present. With alpha = 0 the result is exactly ``mse_loss``.
    """
    p, t = _paired(predicted, target)
    value = mse_loss(p, t)
    degenerate = is_degenerate(p, t, config.variance_epsilon)
    if config.alpha != 0.0 and not degenerate:
        value = value + config.alpha * corr_loss(p, t, config.variance_epsilon)
    return LossValue(value=value, degenerate=degenerate)


def msecorr_value_and_grad(
    predicted, target, config: LossConfig = LossConfig()
) -> tuple[float, np.ndarray]:
    """Evaluate the joint loss and its analytic gradient w.r.t. predicted."""
    p = _as_vector(predicted, "predicted").detach().clone().requires_grad_(True)
    result = msecorr_loss(p, target, config)
    (grad,) = torch.autograd.grad(result.value, p)
    return float(result.value.detach()), grad.detach().cpu().numpy()
