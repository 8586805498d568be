"""Binary confusion counts and the derived segmentation metric suite.

All metrics are one-vs-rest for a configurable positive class (class 1 by
default). A metric whose denominator is zero is undefined, not an error; it
is reported as missing and excluded from aggregation. Aggregation over a
corpus is the mean and sample standard deviation (n-1) of the per-image
values that are defined.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .tensor_store import LabelMask, ValidationError

METRIC_NAMES = ("accuracy", "precision", "recall", "f1", "sensitivity", "specificity")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(pred: LabelMask, truth: LabelMask, positive: int = 1) -> ConfusionCounts:
    if (pred.height, pred.width) != (truth.height, truth.width):
        raise ValidationError(
            f"dimension mismatch: prediction {pred.height}x{pred.width} "
            f"vs truth {truth.height}x{truth.width}"
        )
    if positive < 0:
        raise ValidationError(f"positive class index must be >= 0, got {positive}")
    p = pred.data == positive
    t = truth.data == positive
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    tn = int(np.count_nonzero(~p & ~t))
    return ConfusionCounts(tp, fp, fn, tn)


@dataclass(frozen=True)
class MetricSet:
    accuracy: float | None
    precision: float | None
    recall: float | None
    f1: float | None
    sensitivity: float | None
    specificity: float | None

    def as_dict(self) -> dict[str, float | None]:
        return {name: getattr(self, name) for name in METRIC_NAMES}


def metrics_from_counts(c: ConfusionCounts) -> MetricSet:
    total = c.total
    accuracy = (c.tp + c.tn) / total if total else None
    precision = c.tp / (c.tp + c.fp) if c.tp + c.fp else None
    recall = c.tp / (c.tp + c.fn) if c.tp + c.fn else None
    specificity = c.tn / (c.tn + c.fp) if c.tn + c.fp else None
    if precision is None or recall is None or precision + recall == 0.0:
        f1 = None
    else:
        f1 = 2.0 * precision * recall / (precision + recall)
    # sensitivity is recall under another name; same value, same bits
    return MetricSet(accuracy, precision, recall, f1, recall, specificity)


@dataclass(frozen=True)
class MetricAggregate:
    mean: float | None
    std: float | None
    included: int
    excluded: int


def aggregate(per_image: Sequence[MetricSet]) -> dict[str, MetricAggregate]:
    """Mean and sample std per metric over images where it is defined."""
    if not per_image:
        raise ValidationError("no images to aggregate")
    out: dict[str, MetricAggregate] = {}
    for name in METRIC_NAMES:
        vals = [getattr(m, name) for m in per_image]
        vals = [v for v in vals if v is not None]
        n = len(vals)
        if n == 0:
            out[name] = MetricAggregate(None, None, 0, len(per_image))
            continue
        mean = math.fsum(vals) / n
        std = 0.0 if n == 1 else math.sqrt(math.fsum((v - mean) ** 2 for v in vals) / (n - 1))
        out[name] = MetricAggregate(mean, std, n, len(per_image) - n)
    return out


def build_eval_report(
    method: str,
    positive_class: int,
    rows: Sequence[tuple[str, ConfusionCounts, MetricSet]],
) -> dict:
    """JSON-ready evaluation report (schema version 1)."""
    agg = aggregate([m for _, _, m in rows])
    return {
        "format_version": 1,
        "method": method,
        "positive_class": positive_class,
        "images": [
            {
                "image_id": image_id,
                "counts": {"tp": c.tp, "fp": c.fp, "fn": c.fn, "tn": c.tn},
                "metrics": m.as_dict(),
            }
            for image_id, c, m in rows
        ],
        "aggregate": {
            name: {
                "mean": a.mean,
                "std": a.std,
                "included": a.included,
                "excluded": a.excluded,
            }
            for name, a in agg.items()
        },
    }
