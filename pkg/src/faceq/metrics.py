"""Evaluation metrics: SRCC, PLCC, and their mean as the final score.

Constant inputs raise DegenerateInput rather than returning NaN, so broken
evaluations fail loudly. Values are kept at full float64 precision here;
4-decimal table rounding is a display concern (see ``round4``).
"""

from __future__ import annotations

from dataclasses import dataclass
from decimal import ROUND_HALF_EVEN, Decimal

import numpy as np
from scipy.stats import rankdata

from .errors import DegenerateInput, LengthMismatch, NonFiniteInput


@dataclass(frozen=True)
class MetricsReport:
    srcc: float
    plcc: float
    final: float
    n: int

    def to_dict(self) -> dict:
        return {"srcc": self.srcc, "plcc": self.plcc, "final": self.final, "n": self.n}


def _paired_arrays(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64).reshape(-1)
    g = np.asarray(gt, dtype=np.float64).reshape(-1)
    if p.size != g.size:
        raise LengthMismatch(f"pred has {p.size} entries, gt has {g.size}")
    if p.size < 2:
        raise DegenerateInput("correlation needs at least 2 samples")
    if not (np.isfinite(p).all() and np.isfinite(g).all()):
        raise NonFiniteInput("metric inputs contain NaN or Inf")
    return p, g


def plcc(pred, gt) -> float:
    """Pearson linear correlation coefficient."""
    p, g = _paired_arrays(pred, gt)
    pd = p - p.mean()
    gd = g - g.mean()
    ssp = float(np.dot(pd, pd))
    ssg = float(np.dot(gd, gd))
    if ssp == 0.0 or ssg == 0.0:
        raise DegenerateInput("constant vector has no defined correlation")
    return float(np.dot(pd, gd) / np.sqrt(ssp * ssg))


def srcc(pred, gt) -> float:
    """Spearman rank correlation: Pearson over average-fractional ranks.

    Ties receive the mean of the rank span they occupy.
    """
    p, g = _paired_arrays(pred, gt)
    return plcc(rankdata(p, method="average"), rankdata(g, method="average"))


def final_score(pred, gt) -> MetricsReport:
    """SRCC, PLCC, and their mean over one prediction set."""
    p, g = _paired_arrays(pred, gt)
    s = srcc(p, g)
    l = plcc(p, g)
    return MetricsReport(srcc=s, plcc=l, final=(s + l) / 2.0, n=int(p.size))


def round4(value: float) -> str:
    """Render a metric the way result tables do: 4 decimals, half-even.

    Rounds the shortest decimal representation of the float, so e.g. the
    exact-looking means 0.98615 -> '0.9862' and 0.65785 -> '0.6578'.
    """
    return str(Decimal(repr(float(value))).quantize(Decimal("0.0001"), rounding=ROUND_HALF_EVEN))
