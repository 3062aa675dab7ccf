"""Elevation-estimation evaluation metrics.

Mean relative error, RMSE, RMSE of natural logs, and the nested ratio
accuracies delta_1..3 with thresholds 1.25^i. Pixels where either raster is
non-positive fall outside the log and ratio domains; they are excluded from
the valid set and counted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class MetricsReport:
    rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float
    n_valid: int
    n_excluded: int = 0

    def to_dict(self) -> dict:
        return {
            "rel": self.rel, "rmse": self.rmse, "rmse_log": self.rmse_log,
            "delta1": self.delta1, "delta2": self.delta2, "delta3": self.delta3,
            "n_valid": self.n_valid, "n_excluded": self.n_excluded,
        }


DELTA_BASE = 1.25


def evaluate(pred, gt, valid=None, rmse_over_all: bool = False) -> MetricsReport:
    """Score a predicted elevation raster against ground truth.

    Arrays may be 2-D grids or flat; shapes must match. ``valid`` optionally
    restricts the evaluated pixels before the positivity filter is applied.
    With ``rmse_over_all`` the RMSE alone is computed over the pre-filter
    pixel set; by default every metric shares the same valid set.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if valid is not None:
        base = np.asarray(valid, dtype=bool)
        if base.shape != pred.shape:
            raise ValueError("valid mask shape must match rasters")
    else:
        base = np.ones(pred.shape, dtype=bool)

    positive = base & (pred > 0) & (gt > 0)
    n_valid = int(positive.sum())
    n_excluded = int(base.sum()) - n_valid
    if n_valid == 0:
        raise ValueError("no valid pixels (need pred > 0 and gt > 0)")

    p = pred[positive]
    g = gt[positive]
    diff = p - g
    rel = float(np.mean(np.abs(diff) / g))
    if rmse_over_all:
        d_all = (pred - gt)[base]
        rmse = float(np.sqrt(np.mean(d_all * d_all)))
    else:
        rmse = float(np.sqrt(np.mean(diff * diff)))
    log_diff = np.log(p) - np.log(g)
    rmse_log = float(np.sqrt(np.mean(log_diff * log_diff)))
    ratio = np.maximum(p / g, g / p)
    delta1 = float(np.mean(ratio < DELTA_BASE))
    delta2 = float(np.mean(ratio < DELTA_BASE ** 2))
    delta3 = float(np.mean(ratio < DELTA_BASE ** 3))
    return MetricsReport(rel=rel, rmse=rmse, rmse_log=rmse_log,
                         delta1=delta1, delta2=delta2, delta3=delta3,
                         n_valid=n_valid, n_excluded=n_excluded)
