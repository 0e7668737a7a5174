"""Point and probabilistic forecast metrics.

Clinical accuracy counts predictions within 0.1 logMAR of the observed value
(closed interval, about one eye-chart line).  The probabilistic scores use
the closed-form Gaussian CRPS and central credible-interval coverage at the
observation level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

CLINICAL_TOLERANCE = 0.1  # logMAR


@dataclass
class MetricReport:
    mse: float
    mae: float
    r2: float | None
    clinical_accuracy: float        # percent
    n_samples: int
    crps: float | None = None
    coverage95: float | None = None  # percent

    def to_json(self) -> dict:
        return dict(self.__dict__)


def point_metrics(preds, targets):
    """(mse, mae, r2, clinical accuracy %); r2 is None when the targets
    carry no variance."""
    preds = np.asarray(preds, dtype=np.float64).reshape(-1)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    if preds.shape != targets.shape or preds.size == 0:
        raise ValueError("predictions and targets must be equal-length and "
                         "non-empty")
    err = preds - targets
    mse = float(np.mean(err * err))
    mae = float(np.mean(np.abs(err)))
    sst = float(np.sum((targets - targets.mean()) ** 2))
    r2 = None if sst == 0.0 else float(1.0 - np.sum(err * err) / sst)
    accuracy = float(np.mean(np.abs(err) <= CLINICAL_TOLERANCE) * 100.0)
    return mse, mae, r2, accuracy


def crps_gaussian(mean, variance, target):
    """Closed-form CRPS of N(mean, variance) against a scalar outcome:
    sigma * (z (2 Phi(z) - 1) + 2 phi(z) - 1 / sqrt(pi))."""
    mean = np.asarray(mean, dtype=np.float64)
    variance = np.asarray(variance, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if np.any(variance <= 0):
        raise ValueError("CRPS requires positive variance")
    sigma = np.sqrt(variance)
    z = (target - mean) / sigma
    phi = np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
    return sigma * (z * (2.0 * ndtr(z) - 1.0) + 2.0 * phi
                    - 1.0 / math.sqrt(math.pi))


def interval_coverage(means, variances, targets, level: float = 0.95):
    """Percent of targets inside the central credible interval."""
    means = np.asarray(means, dtype=np.float64)
    variances = np.asarray(variances, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if np.any(variances < 0):
        raise ValueError("coverage requires non-negative variances")
    half = ndtri(0.5 + level / 2.0) * np.sqrt(variances)
    inside = np.abs(targets - means) <= half
    return float(np.mean(inside) * 100.0)


def evaluate_point(preds, targets) -> MetricReport:
    mse, mae, r2, accuracy = point_metrics(preds, targets)
    return MetricReport(mse=mse, mae=mae, r2=r2, clinical_accuracy=accuracy,
                        n_samples=int(np.size(targets)))


def evaluate_gaussian(means, variances, targets) -> MetricReport:
    """Full report for Gaussian predictions (variances at observation level)."""
    report = evaluate_point(means, targets)
    report.crps = float(np.mean(crps_gaussian(means, variances, targets)))
    report.coverage95 = interval_coverage(means, variances, targets)
    return report


def format_table(headers, rows) -> str:
    """Aligned-column text table (headers + stringified rows)."""
    cells = [[str(h) for h in headers]]
    for row in rows:
        cells.append(["" if v is None else
                      (f"{v:.4f}" if isinstance(v, float) else str(v))
                      for v in row])
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    lines = []
    for i, row in enumerate(cells):
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
