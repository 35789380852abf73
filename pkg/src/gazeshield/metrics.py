"""Classification metrics: accuracy, per-class precision/recall/F1, confusion matrix, cross-entropy."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

PROB_CLAMP = 1e-12


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int
    # set when a denominator was zero and the value was reported as 0
    zero_division: bool = False


@dataclass(frozen=True, eq=False)
class EvalReport:
    labels: tuple[str, ...]
    accuracy: float
    per_class: dict[str, ClassMetrics]
    confusion: np.ndarray  # rows = true, cols = predicted

    @property
    def n_samples(self) -> int:
        return int(self.confusion.sum())

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "n_samples": self.n_samples,
            "labels": list(self.labels),
            "per_class": {
                lab: {
                    "precision": m.precision,
                    "recall": m.recall,
                    "f1": m.f1,
                    "support": m.support,
                    "zero_division": m.zero_division,
                }
                for lab, m in self.per_class.items()
            },
            "confusion": self.confusion.astype(int).tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def confusion_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["true\\pred", *self.labels])
        for lab, row in zip(self.labels, self.confusion.astype(int).tolist()):
            writer.writerow([lab, *row])
        return buf.getvalue()

    def write_confusion_csv(self, path) -> None:
        Path(path).write_text(self.confusion_csv(), encoding="utf-8")


def _safe_div(num: float, den: float) -> tuple[float, bool]:
    return (num / den, False) if den > 0 else (0.0, True)


def evaluate(y_true, y_pred, labels: Sequence[str]) -> EvalReport:
    """Report for integer label indices ``y_true``/``y_pred`` into ``labels``."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"length mismatch: {len(y_true)} true vs {len(y_pred)} predicted")
    C = len(labels)
    for arr, name in ((y_true, "true"), (y_pred, "predicted")):
        if arr.size and (arr.min() < 0 or arr.max() >= C):
            raise ValueError(f"{name} label index outside 0..{C - 1}")
    confusion = np.zeros((C, C), dtype=np.int64)
    np.add.at(confusion, (y_true, y_pred), 1)
    per_class = {}
    for c, lab in enumerate(labels):
        tp = int(confusion[c, c])
        precision, p_flag = _safe_div(tp, int(confusion[:, c].sum()))
        recall, r_flag = _safe_div(tp, int(confusion[c].sum()))
        f1, f_flag = _safe_div(2 * precision * recall, precision + recall)
        per_class[str(lab)] = ClassMetrics(precision, recall, f1, int(confusion[c].sum()),
                                           p_flag or r_flag or f_flag)
    # mean of per-sample indicators; equals trace/sum exactly for integer counts
    accuracy = float(np.mean(y_true == y_pred)) if y_true.size else 0.0
    return EvalReport(tuple(str(l) for l in labels), accuracy, per_class, confusion)


def cross_entropy(prob_rows, y_true) -> float:
    """Mean of ``-log p(true class)`` with probabilities clamped to [1e-12, 1]."""
    P = np.asarray(prob_rows, dtype=np.float64)
    y = np.asarray(y_true, dtype=np.int64)
    if P.ndim != 2 or len(P) != len(y) or len(y) == 0:
        raise ValueError("prob_rows must be N x C with one label per row")
    if np.any(np.abs(P.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("probability rows must sum to 1 within 1e-6")
    p = np.clip(P[np.arange(len(y)), y], PROB_CLAMP, 1.0)
    return float(-np.mean(np.log(p)))


def accuracy(y_true, y_pred) -> float:
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    if y_true.shape != y_pred.shape:
        raise ValueError("length mismatch")
    return float(np.mean(y_true == y_pred))

