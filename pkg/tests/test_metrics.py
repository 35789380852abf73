import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gazeshield.metrics import accuracy, cross_entropy, evaluate


def test_all_correct():
    r = evaluate([0, 1, 2], [0, 1, 2], ["a", "b", "c"])
    assert r.accuracy == 1.0
    assert np.array_equal(r.confusion, np.eye(3, dtype=int))


def test_all_wrong_binary():
    r = evaluate([0, 1, 0, 1], [1, 0, 1, 0], ["a", "b"])
    assert r.accuracy == 0.0
    assert r.confusion.tolist() == [[0, 2], [2, 0]]


def test_hand_computed_example():
    r = evaluate([0, 0, 1, 1], [0, 1, 1, 1], ["0", "1"])
    assert r.accuracy == 0.75
    m = r.per_class["1"]
    assert m.precision == pytest.approx(2 / 3) and m.recall == 1.0 and m.f1 == pytest.approx(0.8)
    m0 = r.per_class["0"]
    assert m0.precision == 1.0 and m0.recall == 0.5 and m0.support == 2


def test_zero_division_flagged():
    r = evaluate([0, 0, 1], [0, 0, 0], ["a", "b"])
    m = r.per_class["b"]
    assert m.precision == 0.0 and m.zero_division and not math.isnan(m.f1)


def test_evaluate_errors():
    with pytest.raises(ValueError):
        evaluate([0, 1], [0], ["a", "b"])
    with pytest.raises(ValueError):
        evaluate([0, 1], [0, 2], ["a", "b"])


def test_report_serialisation():
    r = evaluate([0, 0, 1], [0, 1, 1], ["x", "y"])
    assert r.confusion_csv() == "true\\pred,x,y\nx,1,1\ny,0,1\n"
    d = r.to_dict()
    assert d["n_samples"] == 3 and d["confusion"] == [[1, 1], [0, 1]]


@given(st.integers(1, 5).flatmap(lambda c: st.tuples(
    st.just(c), st.lists(st.tuples(st.integers(0, c - 1), st.integers(0, c - 1)), min_size=1, max_size=200))))
def test_accuracy_equals_confusion_trace(args):
    c, pairs = args
    t, p = map(list, zip(*pairs))
    r = evaluate(t, p, [str(i) for i in range(c)])
    assert r.confusion.sum() == len(t)
    assert r.accuracy == np.trace(r.confusion) / r.confusion.sum()
    assert r.accuracy == accuracy(t, p)


def test_cross_entropy_examples():
    assert cross_entropy([[1.0, 0.0], [0.0, 1.0]], [0, 1]) == 0.0
    assert cross_entropy(np.full((3, 4), 0.25), [0, 1, 2]) == pytest.approx(math.log(4))
    assert cross_entropy([[0.0, 1.0]], [0]) == pytest.approx(27.631, abs=1e-3)
    with pytest.raises(ValueError):
        cross_entropy([[0.5, 0.6]], [0])
