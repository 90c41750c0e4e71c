"""Hard evaluation metrics: accuracy and group disparity maxima.

Everything here thresholds scores into {-1, +1} decisions and counts; the
differentiable surrogates live in :mod:`paretofair.fairloss`.  Groups whose
rate is undefined (empty, or without actual positives for TPR) are excluded
from disparity maxima and reported, never silently zeroed.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DegenerateGroupError, ShapeError, ValidationError
from .groups import GroupTable, SensitiveAttributes, marginal_attribute_groups

HARD_THRESHOLD = 0.5

PER_ATTRIBUTE = "per_attribute"
INTERSECTIONAL = "intersectional"


def threshold_scores(scores: np.ndarray,
                     threshold: float = HARD_THRESHOLD) -> np.ndarray:
    """Map probability scores to +/-1 decisions; positive only strictly above."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.where(scores > threshold, 1, -1)


def accuracy(preds: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of matching +/-1 decisions."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise ShapeError(
            f"predictions {preds.shape} and labels {labels.shape} differ")
    if preds.size == 0:
        raise ValidationError("accuracy of an empty batch is undefined")
    return float(np.mean(preds == labels))


def dp_rate(preds: np.ndarray, mask: np.ndarray) -> Optional[float]:
    """Positive-decision fraction within a group; None when the group is empty."""
    preds = np.asarray(preds)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return None
    return float(np.mean(preds[mask] == 1))


def tpr_rate(preds: np.ndarray, labels: np.ndarray,
             mask: np.ndarray) -> Optional[float]:
    """True-positive rate within a group; None without actual positives."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    mask = np.asarray(mask, dtype=bool)
    positives = mask & (labels == 1)
    if not positives.any():
        return None
    return float(np.mean(preds[positives] == 1))


def max_disparity(rates) -> float:
    """Largest absolute pairwise gap among present rates.

    Accepts a mapping or sequence; None and NaN entries count as absent.
    """
    values = rates.values() if isinstance(rates, dict) else rates
    present = [float(r) for r in values if r is not None and not np.isnan(r)]
    if len(present) < 2:
        raise DegenerateGroupError(
            f"disparity needs >= 2 present group rates, got {len(present)}")
    return float(max(present) - min(present))


def group_rates(preds: np.ndarray, labels: Optional[np.ndarray],
                table: GroupTable, metric: str) -> dict[int, Optional[float]]:
    """Per-group DP or TPR rates keyed by group id, absent entries as None."""
    if metric == "DP":
        return {g: dp_rate(preds, table.masks[g]) for g in range(table.group_count)}
    if metric == "TPR":
        return {g: tpr_rate(preds, labels, table.masks[g])
                for g in range(table.group_count)}
    raise ValidationError(f"metric must be 'DP' or 'TPR', got {metric!r}")


def per_attribute_disparity(preds: np.ndarray, labels: np.ndarray,
                            attrs: SensitiveAttributes,
                            metric: str) -> dict[int, float]:
    """Disparity of each attribute over its own levels, ignoring the others."""
    out = {}
    for a in range(attrs.n_attributes):
        table = marginal_attribute_groups(attrs, a)
        out[a] = max_disparity(group_rates(preds, labels, table, metric))
    return out


@dataclass(frozen=True)
class EvalReport:
    """Flat summary of one evaluation: accuracy plus DP/TPR disparities."""

    accuracy: float
    ddp: float
    deo: float
    per_group_dp: dict[int, Optional[float]]
    per_group_tpr: dict[int, Optional[float]]
    mode: str
    excluded_groups: tuple[tuple[int, str], ...]

    def to_record(self) -> dict:
        record = {"accuracy": self.accuracy, "ddp": self.ddp, "deo": self.deo,
                  "mode": self.mode,
                  "excluded": ";".join(f"{g}:{why}" for g, why
                                       in self.excluded_groups)}
        for g, rate in sorted(self.per_group_dp.items()):
            record[f"dp_g{g}"] = rate
        for g, rate in sorted(self.per_group_tpr.items()):
            record[f"tpr_g{g}"] = rate
        return record


def evaluate(preds: np.ndarray, labels: np.ndarray, table: GroupTable,
             mode: str = INTERSECTIONAL) -> EvalReport:
    """Accuracy plus DP and TPR disparity maxima over the table's groups."""
    if mode not in (PER_ATTRIBUTE, INTERSECTIONAL):
        raise ValidationError(
            f"mode must be '{PER_ATTRIBUTE}' or '{INTERSECTIONAL}', got {mode!r}")
    dp = group_rates(preds, None, table, "DP")
    tpr = group_rates(preds, labels, table, "TPR")
    excluded = []
    for g in range(table.group_count):
        if dp[g] is None:
            excluded.append((g, "empty"))
        elif tpr[g] is None:
            excluded.append((g, "no actual positives"))
    return EvalReport(
        accuracy=accuracy(preds, labels),
        ddp=max_disparity(dp),
        deo=max_disparity(tpr),
        per_group_dp=dp,
        per_group_tpr=tpr,
        mode=mode,
        excluded_groups=tuple(excluded),
    )
