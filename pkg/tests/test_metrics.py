import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from waffle.metrics import detection_metrics


def test_perfect_prediction():
    r = detection_metrics([1, 0, 1, 0], [1, 0, 1, 0])
    assert (r.accuracy, r.precision, r.recall, r.f1) == (1.0, 1.0, 1.0, 1.0)
    assert r.degenerate == ()


def test_all_benign_prediction_is_misleading():
    truth = ["A"] + ["B"] * 9
    r = detection_metrics(["B"] * 10, truth)
    assert r.accuracy == pytest.approx(0.9)
    assert r.recall == 0.0
    assert r.precision == 0.0 and "precision" in r.degenerate


def test_hand_evaluated_counts():
    pred = [1] * 3 + [1] * 1 + [0] * 2 + [0] * 4
    truth = [1] * 3 + [0] * 1 + [1] * 2 + [0] * 4
    r = detection_metrics(pred, truth)
    assert (r.tp, r.fp, r.fn, r.tn) == (3, 1, 2, 4)
    assert r.precision == pytest.approx(0.75)
    assert r.recall == pytest.approx(0.6)
    assert r.f1 == pytest.approx(2 * 3 / (2 * 3 + 1 + 2))


def test_length_mismatch():
    with pytest.raises(ValueError):
        detection_metrics([1, 0], [1])


def test_empty_federation_degenerate():
    r = detection_metrics([], [])
    assert set(r.degenerate) == {"accuracy", "precision", "recall", "f1"}


@given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=60))
def test_identities(pairs):
    pred, truth = zip(*pairs)
    r = detection_metrics(list(pred), list(truth))
    assert r.tp + r.tn + r.fp + r.fn == len(pairs)
    if "precision" not in r.degenerate:
        assert r.precision * (r.tp + r.fp) == pytest.approx(r.tp)
    if r.precision > 0 and r.recall > 0:
        assert r.f1 == pytest.approx(2 * r.precision * r.recall / (r.precision + r.recall))
    assert r.accuracy == pytest.approx(np.mean(np.array(pred) == np.array(truth)))
