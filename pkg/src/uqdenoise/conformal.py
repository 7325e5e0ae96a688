"""Conformalized quantile regression.

Nonconformity scores use the standard two-sided form
``s = max(lower - y, y - upper)`` (negative when y is strictly inside the
interval). Calibration takes the k-th smallest score with
``k = ceil((n + 1) * (1 - alpha))``, which guarantees finite-sample marginal
coverage under exchangeability. Corrections are computed per output channel
since channels may live on different scales.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError
from .model import QuantileField

SENTINEL = math.inf


class CalibrationSetTooSmall(ValueError):
    def __init__(self, n, alpha):
        needed = math.ceil((1.0 - alpha) / alpha)
        super().__init__(
            f"calibration set of {n} elements cannot support alpha={alpha}; "
            f"need at least {needed} scores (k = ceil((n+1)(1-alpha)) must be <= n)")


@dataclass
class CalibrationRecord:
    """Scores and the interval correction derived from them for one channel."""

    scores: np.ndarray
    alpha: float
    correction: float

    @property
    def n(self):
        return len(self.scores)


def nonconformity_scores(field: QuantileField, truth) -> np.ndarray:
    """Per-element score max(lower - y, y - upper); same shape as truth."""
    truth = np.asarray(truth)
    if truth.shape != field.median.shape:
        raise ShapeError(
            f"nonconformity: truth shape {truth.shape} != field shape {field.median.shape}")
    return np.maximum(field.lower - truth, truth - field.upper)


def calibrate(scores, alpha) -> CalibrationRecord:
    """Correction = k-th smallest score, k = ceil((n+1)(1-alpha)); +inf if k > n."""
    scores = np.asarray(scores, dtype=float).ravel()
    if scores.size == 0:
        raise ValueError("scores must be nonempty")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0,1), got {alpha}")
    n = scores.size
    k = math.ceil((n + 1) * (1.0 - alpha))
    if k > n:
        correction = SENTINEL
    else:
        correction = float(np.sort(scores)[k - 1])
    return CalibrationRecord(scores=scores, alpha=alpha, correction=correction)


def calibrate_field(field: QuantileField, truth, alpha):
    """Per-channel calibration records for a (C, *spatial) field."""
    scores = nonconformity_scores(field, truth)
    return [calibrate(scores[c].ravel(), alpha) for c in range(scores.shape[0])]


def apply_correction(field: QuantileField, records, clamp_range=None) -> QuantileField:
    """Widen (or shrink) intervals by the calibrated correction; median unchanged.

    ``records`` is one CalibrationRecord per channel (or a single record
    applied to all channels). Negative corrections are truncated elementwise
    so the corrected bounds never cross the median, which keeps the
    lower <= median <= upper invariant while only ever making shrinkage more
    conservative.
    """
    if isinstance(records, CalibrationRecord):
        records = [records] * field.median.shape[0]
    if len(records) != field.median.shape[0]:
        raise ShapeError(
            f"apply_correction: {len(records)} records for {field.median.shape[0]} channels")
    for r in records:
        if not math.isfinite(r.correction):
            raise CalibrationSetTooSmall(r.n, r.alpha)
    corr = np.array([r.correction for r in records])
    corr = corr.reshape((-1,) + (1,) * (field.median.ndim - 1))
    # corr >= 0 widens both sides fully; corr < 0 shrinks but never past the median
    shrink_lo = np.minimum(-corr, field.median - field.lower)
    shrink_hi = np.minimum(-corr, field.upper - field.median)
    lower = np.where(corr >= 0, field.lower - corr, field.lower + shrink_lo)
    upper = np.where(corr >= 0, field.upper + corr, field.upper - shrink_hi)
    median = field.median.copy()
    if clamp_range is not None:
        lo, hi = clamp_range
        lower = np.clip(lower, lo, hi)
        median = np.clip(median, lo, hi)
        upper = np.clip(upper, lo, hi)
    return QuantileField(lower, median, upper, field.levels)


def coverage(field: QuantileField, truth) -> float:
    """Fraction of elements with lower <= y <= upper."""
    truth = np.asarray(truth)
    if truth.shape != field.median.shape:
        raise ShapeError(
            f"coverage: truth shape {truth.shape} != field shape {field.median.shape}")
    inside = (field.lower <= truth) & (truth <= field.upper)
    return float(inside.mean())


def width_ratio(field: QuantileField, reference) -> float:
    """(q95 - q05 spread of the clean reference) / mean predicted width."""
    reference = np.asarray(reference)
    mean_width = float(field.width().mean())
    if mean_width == 0.0:
        raise ValueError("mean predicted width is zero")
    spread = float(np.quantile(reference, 0.95) - np.quantile(reference, 0.05))
    return spread / mean_width


def records_to_json(records, extra=None) -> str:
    doc = {
        "alpha": records[0].alpha,
        "n": [r.n for r in records],
        "correction": [r.correction for r in records],
    }
    if extra:
        doc.update(extra)
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def records_from_json(text):
    doc = json.loads(text)
    return [
        CalibrationRecord(scores=np.array([]), alpha=doc["alpha"], correction=c)
        for c in doc["correction"]
    ]
