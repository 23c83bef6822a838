"""Confusion counts and the overlap / classification scores derived from them."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def confusion(pred, truth, c: int) -> ConfusionCounts:
    """One-vs-rest counts for class ``c``."""
    pred = np.asarray(pred).ravel()
    truth = np.asarray(truth).ravel()
    if pred.shape != truth.shape:
        raise ValueError(f"confusion: {pred.size} predictions vs {truth.size} labels")
    p, t = pred == c, truth == c
    return ConfusionCounts(
        tp=int(np.sum(p & t)), tn=int(np.sum(~p & ~t)),
        fp=int(np.sum(p & ~t)), fn=int(np.sum(~p & t)))


def _ratio(num: int, den: int, class_absent: bool) -> float:
    # empty-class convention: nothing predicted and nothing present counts as agreement
    if den == 0:
        return 1.0 if class_absent else 0.0
    return num / den


def _absent(c: ConfusionCounts) -> bool:
    return c.tp + c.fp + c.fn == 0


def iou(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fp + c.fn, _absent(c))


def dice(c: ConfusionCounts) -> float:
    return _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, _absent(c))


def pixel_accuracy(c: ConfusionCounts) -> float:
    return _ratio(c.tp + c.tn, c.total, c.total == 0)


def precision(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fp, _absent(c))


def recall(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fn, _absent(c))


def f1(c: ConfusionCounts) -> float:
    p, r = precision(c), recall(c)
    if _absent(c):
        return 1.0
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def accuracy(pred, truth) -> float:
    pred = np.asarray(pred).ravel()
    truth = np.asarray(truth).ravel()
    if pred.shape != truth.shape:
        raise ValueError(f"accuracy: {pred.size} predictions vs {truth.size} labels")
    return 1.0 if pred.size == 0 else float(np.mean(pred == truth))


def summary(pred, truth, num_classes: int) -> dict:
    """Metrics record with the fixed JSON keys; multiclass scores are macro averages."""
    per_class = {}
    for k in range(num_classes):
        c = confusion(pred, truth, k)
        per_class[str(k)] = {
            **asdict(c),
            "precision": precision(c), "recall": recall(c), "f1": f1(c),
            "iou": iou(c), "dice": dice(c),
        }

    def macro(key):
        return float(np.mean([v[key] for v in per_class.values()]))

    return {
        "accuracy": accuracy(pred, truth),
        "precision": macro("precision"),
        "recall": macro("recall"),
        "f1": macro("f1"),
        "iou": macro("iou"),
        "dice": macro("dice"),
        "per_class": per_class,
    }
