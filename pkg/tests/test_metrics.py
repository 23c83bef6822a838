import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ddtl import metrics as M
from ddtl.metrics import ConfusionCounts


def test_confusion_examples():
    truth = np.array([0, 1, 1, 0, 2])
    c = M.confusion(truth, truth, 1)
    assert c.fp == 0 and c.fn == 0
    c = M.confusion(np.full(6, 3), np.zeros(6), 3)
    assert c.fp == 6
    assert M.confusion([1, 0, 1, 1], [1, 1, 0, 1], 1) == ConfusionCounts(tp=2, tn=0, fp=1, fn=1)


def test_confusion_length_mismatch():
    with pytest.raises(ValueError):
        M.confusion([1, 0], [1], 1)


def test_overlap_scores():
    c = ConfusionCounts(tp=50, tn=0, fp=25, fn=25)
    assert M.iou(c) == 0.5
    assert M.dice(c) == pytest.approx(2 / 3, abs=1e-15)
    perfect = M.confusion([1, 1, 0, 0], [1, 1, 0, 0], 1)
    assert M.iou(perfect) == M.dice(perfect) == M.pixel_accuracy(perfect) == 1.0


def test_empty_class_convention():
    absent = ConfusionCounts(tp=0, tn=10, fp=0, fn=0)
    assert M.iou(absent) == M.dice(absent) == M.precision(absent) == M.recall(absent) == 1.0
    missed = ConfusionCounts(tp=0, tn=10, fp=0, fn=3)
    assert M.iou(missed) == 0.0 and M.precision(missed) == 0.0


def test_classification_scores():
    c = ConfusionCounts(tp=9, tn=0, fp=3, fn=1)
    assert M.precision(c) == 0.75
    assert M.recall(c) == 0.9
    assert M.f1(c) == pytest.approx(0.818182, abs=1e-6)


def test_summary_keys_and_perfect_prediction():
    y = np.array([0, 1, 1, 0, 1])
    s = M.summary(y, y, 2)
    assert set(s) == {"accuracy", "precision", "recall", "f1", "iou", "dice", "per_class"}
    assert all(s[k] == 1.0 for k in ("accuracy", "precision", "recall", "f1", "iou", "dice"))


def test_summary_constant_prediction_on_balanced_set():
    s = M.summary(np.zeros(10, dtype=int), np.arange(10) % 2, 2)
    assert s["accuracy"] == 0.5


counts = st.builds(ConfusionCounts, st.integers(0, 10_000), st.integers(0, 10_000),
                   st.integers(0, 10_000), st.integers(0, 10_000))


@given(counts)
def test_metric_identities(c):
    if c.tp + c.fp + c.fn == 0:
        return
    iou, dice = M.iou(c), M.dice(c)
    assert abs(dice - 2 * iou / (1 + iou)) <= 1e-12
    assert abs(iou - dice / (2 - dice)) <= 1e-12
    assert abs(M.f1(c) - dice) <= 1e-12
    for v in (iou, dice, M.precision(c), M.recall(c), M.f1(c), M.pixel_accuracy(c)):
        assert 0.0 <= v <= 1.0


@given(counts)
def test_metrics_monotone_in_tp(c):
    more = ConfusionCounts(c.tp + 1, c.tn, c.fp, c.fn)
    for fn in (M.iou, M.dice, M.precision, M.recall, M.f1):
        if c.tp + c.fp + c.fn == 0:
            continue
        assert fn(more) >= fn(c) - 1e-15
