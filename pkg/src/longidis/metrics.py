"""Binary classification metrics with the positive class at index 1."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import MetricError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        for name in ("tp", "fp", "tn", "fn"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 0:
                raise MetricError(f"{name} must be a non-negative integer, got {value!r}")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion_counts(predictions, labels) -> ConfusionCounts:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise MetricError(
            f"predictions shape {predictions.shape} does not match labels "
            f"shape {labels.shape}"
        )
    # validate on the raw values so 0.5 does not truncate to a valid 0
    for name, arr in (("predictions", predictions), ("labels", labels)):
        if not np.isin(arr, (0, 1)).all():
            raise MetricError(f"{name} must be binary (0 or 1)")
    predictions = predictions.astype(int)
    labels = labels.astype(int)
    return ConfusionCounts(
        tp=int(((predictions == 1) & (labels == 1)).sum()),
        fp=int(((predictions == 1) & (labels == 0)).sum()),
        tn=int(((predictions == 0) & (labels == 0)).sum()),
        fn=int(((predictions == 0) & (labels == 1)).sum()),
    )


def balanced_accuracy(counts: ConfusionCounts) -> float:
    """(sensitivity + specificity) / 2; undefined when a class is absent."""
    if counts.tp + counts.fn == 0:
        raise MetricError("balanced accuracy undefined: no positive samples")
    if counts.tn + counts.fp == 0:
        raise MetricError("balanced accuracy undefined: no negative samples")
    sensitivity = counts.tp / (counts.tp + counts.fn)
    specificity = counts.tn / (counts.tn + counts.fp)
    return (sensitivity + specificity) / 2.0


def accuracy(counts: ConfusionCounts) -> float:
    if counts.total == 0:
        raise MetricError("accuracy undefined on an empty sample set")
    return (counts.tp + counts.tn) / counts.total
