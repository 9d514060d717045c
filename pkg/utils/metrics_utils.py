"""
Metrics Utilities Module

Pixel-level one-vs-rest confusion counts and the precision, recall, F1 and
overall-accuracy figures derived from them. All percentages; a ratio whose
denominator is zero is reported as 0.
"""
from dataclasses import dataclass, field
from typing import Dict, Mapping
import json
import logging

import numpy as np
import pandas as pd

from config.schemas import NUM_CLASSES
from utils.error_utils import ShapeError, validate_label_map

# Configure logging
logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

CLASS_NAMES = {1: "missed", 2: "mistaken"}
TABLE_COLUMNS = [
    "Missed Precision", "Missed Recall", "Missed F1-score",
    "Mistaken Precision", "Mistaken Recall", "Mistaken F1-score",
    "OA",
]


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)

    def to_dict(self) -> Dict[str, int]:
        return {'tp': self.tp, 'fp': self.fp, 'tn': self.tn, 'fn': self.fn}


def confusion_counts(pred_labels: np.ndarray, gt_labels: np.ndarray, class_id: int) -> ConfusionCounts:
    """
    One-vs-rest counts for `class_id`.

    Raises:
        ShapeError: If the maps differ in shape
        LabelValueError: If either map holds a value outside {0, 1, 2}
    """
    pred_labels = np.asarray(pred_labels)
    gt_labels = np.asarray(gt_labels)
    if pred_labels.shape != gt_labels.shape:
        raise ShapeError("Prediction and ground truth differ in shape",
                         {'pred': list(pred_labels.shape), 'gt': list(gt_labels.shape)})
    validate_label_map(pred_labels, "predicted labels")
    validate_label_map(gt_labels, "ground-truth labels")
    pred = pred_labels == class_id
    gt = gt_labels == class_id
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionCounts(tp, fp, pred.size - tp - fp - fn, fn)


def _ratio(numerator: float, denominator: float) -> float:
    return 100.0 * numerator / denominator if denominator else 0.0


def precision(counts: ConfusionCounts) -> float:
    return _ratio(counts.tp, counts.tp + counts.fp)


def recall(counts: ConfusionCounts) -> float:
    return _ratio(counts.tp, counts.tp + counts.fn)


def f1_score(precision_pct: float, recall_pct: float) -> float:
    """Harmonic mean of precision and recall (both in percent)."""
    if precision_pct + recall_pct == 0:
        return 0.0
    return 2.0 * precision_pct * recall_pct / (precision_pct + recall_pct)


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    counts: ConfusionCounts

    @classmethod
    def from_counts(cls, counts: ConfusionCounts) -> "ClassMetrics":
        p, r = precision(counts), recall(counts)
        return cls(p, r, f1_score(p, r), counts)

    def to_dict(self) -> Dict[str, float]:
        return {'precision': self.precision, 'recall': self.recall, 'f1': self.f1}


@dataclass
class MetricsReport:
    """Per-class figures for missed and mistaken areas plus 3-class overall accuracy."""
    missed: ClassMetrics
    mistaken: ClassMetrics
    oa: float
    counts: Dict[int, ConfusionCounts] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, object]:
        return {
            'missed': self.missed.to_dict(),
            'mistaken': self.mistaken.to_dict(),
            'oa': self.oa,
            'counts': {str(c): self.counts[c].to_dict() for c in sorted(self.counts)},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def row(self) -> Dict[str, float]:
        values = [self.missed.precision, self.missed.recall, self.missed.f1,
                  self.mistaken.precision, self.mistaken.recall, self.mistaken.f1, self.oa]
        return dict(zip(TABLE_COLUMNS, values))

    def to_frame(self, name: str = "") -> pd.DataFrame:
        """One-row table in the column order Precision, Recall, F1-score per class, then OA."""
        frame = pd.DataFrame([self.row()], columns=TABLE_COLUMNS)
        frame.insert(0, "Method", name)
        return frame

    def to_csv(self, path: str, name: str = "") -> None:
        self.to_frame(name).to_csv(path, index=False, float_format="%.3f")


def metrics_from_counts(counts: Mapping[int, ConfusionCounts]) -> MetricsReport:
    """
    Precision, recall and F1 for the missed and mistaken classes, and OA as
    the share of pixels whose class is right.

    Args:
        counts: One-vs-rest counts for classes 0, 1 and 2 over the same pixels
    """
    counts = {int(c): counts[c] for c in counts}
    correct = sum(counts[c].tp for c in range(NUM_CLASSES) if c in counts)
    total = next(iter(counts.values())).total if counts else 0
    return MetricsReport(
        missed=ClassMetrics.from_counts(counts.get(1, ConfusionCounts())),
        mistaken=ClassMetrics.from_counts(counts.get(2, ConfusionCounts())),
        oa=_ratio(correct, total),
        counts=counts,
    )


class ConfusionAccumulator:
    """Micro-aggregation of per-class counts over any number of label maps."""

    def __init__(self):
        self.reset()

    def reset(self) -> None:
        self.counts: Dict[int, ConfusionCounts] = {c: ConfusionCounts() for c in range(NUM_CLASSES)}

    def update(self, pred_labels: np.ndarray, gt_labels: np.ndarray) -> None:
        for c in range(NUM_CLASSES):
            self.counts[c] = self.counts[c] + confusion_counts(pred_labels, gt_labels, c)

    def merge(self, other: "ConfusionAccumulator") -> "ConfusionAccumulator":
        for c in range(NUM_CLASSES):
            self.counts[c] = self.counts[c] + other.counts[c]
        return self

    @property
    def pixels(self) -> int:
        return self.counts[0].total

    def get(self) -> MetricsReport:
        return metrics_from_counts(self.counts)
