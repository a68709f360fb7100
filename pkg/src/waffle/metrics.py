"""Detection metrics with the attacker class as positive."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

__all__ = ["DetectionReport", "detection_metrics"]


def _as_bool(labels):
    arr = np.asarray(labels)
    if arr.dtype.kind in "US":
        return arr == "A"
    return arr.astype(bool)


@dataclass(frozen=True)
class DetectionReport:
    tp: int
    tn: int
    fp: int
    fn: int
    accuracy: float
    precision: float
    recall: float
    f1: float
    degenerate: tuple = ()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["degenerate"] = list(self.degenerate)
        return d


def _ratio(num, den, name, degenerate):
    if den == 0:
        degenerate.append(name)
        return 0.0
    return num / den


def detection_metrics(predicted, truth) -> DetectionReport:
    """Confusion counts and accuracy / precision / recall / F1.

    Labels may be booleans, 0/1 or the strings "A" (attacker) / "B" (benign).
    Any metric with a zero denominator is reported as 0 and named in
    ``degenerate``.
    """
    pred = _as_bool(predicted)
    true = _as_bool(truth)
    if pred.shape != true.shape:
        raise ValueError(f"predicted has {pred.size} labels but truth has {true.size}")
    tp = int(np.sum(pred & true))
    tn = int(np.sum(~pred & ~true))
    fp = int(np.sum(pred & ~true))
    fn = int(np.sum(~pred & true))
    degenerate = []
    accuracy = _ratio(tp + tn, tp + tn + fp + fn, "accuracy", degenerate)
    precision = _ratio(tp, tp + fp, "precision", degenerate)
    recall = _ratio(tp, tp + fn, "recall", degenerate)
    f1 = _ratio(2 * tp, 2 * tp + fp + fn, "f1", degenerate)
    return DetectionReport(tp, tn, fp, fn, accuracy, precision, recall, f1, tuple(degenerate))
