"""Confusion-matrix metrics with support-weighted F1."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

# column order of the class-wise results table
DEFAULT_LABELS: tuple[str, ...] = ("neutral", "surprise", "fear", "sadness", "joy", "disgust", "anger")

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "EvaluationReport",
    "type": "object",
    "required": ["labels", "confusion", "precision", "recall", "f1", "support", "weighted_f1", "n_samples"],
    "additionalProperties": False,
    "properties": {
        "labels": {"type": "array", "items": {"type": "string"}, "minItems": 2},
        "confusion": {
            "type": "array",
            "items": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        },
        "precision": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}},
        "recall": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}},
        "f1": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}},
        "support": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "weighted_f1": {"type": "number", "minimum": 0, "maximum": 1},
        "n_samples": {"type": "integer", "minimum": 0},
    },
}


def label_names(n_classes: int) -> list[str]:
    if n_classes == len(DEFAULT_LABELS):
        return list(DEFAULT_LABELS)
    return [f"class_{i}" for i in range(n_classes)]


@dataclass
class EvaluationReport:
    labels: list[str]
    confusion: np.ndarray  # rows: true class, columns: predicted class
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    weighted_f1: float

    @property
    def n_samples(self) -> int:
        return int(self.confusion.sum())

    def to_dict(self) -> dict:
        return {
            "labels": list(self.labels),
            "confusion": self.confusion.astype(int).tolist(),
            "precision": [float(v) for v in self.precision],
            "recall": [float(v) for v in self.recall],
            "f1": [float(v) for v in self.f1],
            "support": [int(v) for v in self.support],
            "weighted_f1": float(self.weighted_f1),
            "n_samples": self.n_samples,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvaluationReport":
        return cls(
            labels=list(d["labels"]),
            confusion=np.asarray(d["confusion"], dtype=np.int64),
            precision=np.asarray(d["precision"], dtype=np.float64),
            recall=np.asarray(d["recall"], dtype=np.float64),
            f1=np.asarray(d["f1"], dtype=np.float64),
            support=np.asarray(d["support"], dtype=np.int64),
            weighted_f1=float(d["weighted_f1"]),
        )

    def to_table(self, row_name: str = "model") -> str:
        """Class-wise F1 (percent) followed by the weighted average, one aligned row."""
        return format_table([(row_name, self)])


def format_table(rows: Sequence[tuple[str, EvaluationReport]]) -> str:
    if not rows:
        return ""
    labels = rows[0][1].labels
    header = ["Proposed method", *labels, "w-average F1"]
    body = [[name, *(f"{100 * v:.2f}" for v in rep.f1), f"{100 * rep.weighted_f1:.2f}"] for name, rep in rows]
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]
    lines = ["  ".join(h.ljust(w) if i == 0 else h.rjust(w) for i, (h, w) in enumerate(zip(header, widths)))]
    lines.append("-" * len(lines[0]))
    for r in body:
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))))
    return "\n".join(lines)


def confusion_matrix(predictions, labels, n_classes: int) -> np.ndarray:
    predictions = np.asarray(predictions, dtype=np.int64).ravel()
    labels = np.asarray(labels, dtype=np.int64).ravel()
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (labels, predictions), 1)
    return cm


def weighted_f1(predictions, labels, n_classes: int | None = None,
                names: Sequence[str] | None = None) -> EvaluationReport:
    """Per-class precision/recall/F1 and their support-weighted F1 average.

    A class with no predictions has precision 0, with no true instances recall
    0, and F1 is 0 whenever precision + recall is 0.
    """
    predictions = np.asarray(predictions, dtype=np.int64).ravel()
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if predictions.shape != labels.shape:
        raise ValueError(f"predictions ({predictions.size}) and labels ({labels.size}) differ in length")
    if n_classes is None:
        n_classes = int(max(predictions.max(initial=-1), labels.max(initial=-1)) + 1)
        n_classes = max(n_classes, 2)
    for arr, what in ((labels, "label"), (predictions, "prediction")):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise ValueError(f"{what} outside [0, {n_classes})")
    cm = confusion_matrix(predictions, labels, n_classes)
    tp = np.diag(cm).astype(np.float64)
    pred_count = cm.sum(axis=0).astype(np.float64)
    support = cm.sum(axis=1)
    precision = np.divide(tp, pred_count, out=np.zeros(n_classes), where=pred_count > 0)
    recall = np.divide(tp, support, out=np.zeros(n_classes), where=support > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros(n_classes), where=denom > 0)
    total = support.sum()
    wf1 = float((support * f1).sum() / total) if total else 0.0
    names = list(names) if names is not None else label_names(n_classes)
    if len(names) != n_classes:
        raise ValueError(f"{len(names)} label names for {n_classes} classes")
    return EvaluationReport(names, cm, precision, recall, f1, support, wf1)
