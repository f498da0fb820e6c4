import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mitoshift import metrics
from mitoshift.errors import UndefinedMetricError


def brute_auc(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l == 1]
    neg = [s for s, l in zip(scores, labels) if l == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def test_confusion_examples():
    c = metrics.confusion([1, 0], [1, 0])
    assert (c.tp, c.tn, c.fp, c.fn) == (1, 1, 0, 0)
    c = metrics.confusion([1, 1, 0], [0, 0, 0])
    assert (c.fn, c.tn, c.tp, c.fp) == (2, 1, 0, 0)


def test_confusion_errors():
    with pytest.raises(ValueError):
        metrics.confusion([], [])
    with pytest.raises(ValueError):
        metrics.confusion([1, 0], [1])


def test_hand_computed_confusion():
    c = metrics.ConfusionCounts(tp=95, fn=5, tn=80, fp=20)
    assert metrics.sensitivity(c) == pytest.approx(0.95, abs=1e-15)
    assert metrics.specificity(c) == pytest.approx(0.80, abs=1e-15)
    assert metrics.balanced_accuracy(c) == pytest.approx(0.875, abs=1e-15)


def test_perfect_and_all_positive():
    y = np.array([0, 1, 0, 1])
    assert metrics.balanced_accuracy(metrics.confusion(y, y)) == 1.0
    assert metrics.balanced_accuracy(metrics.confusion(y, np.ones(4))) == 0.5


def test_empty_class_is_undefined():
    c = metrics.confusion([0, 0], [0, 1])
    with pytest.raises(UndefinedMetricError, match="undefined metric"):
        metrics.sensitivity(c)
    with pytest.raises(UndefinedMetricError, match="undefined metric"):
        metrics.roc_auc([0.1, 0.2], [1, 1])


def test_auc_examples():
    assert metrics.roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert metrics.roc_auc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    assert metrics.roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_auc_matches_brute_force_random():
    r = np.random.default_rng(0)
    for _ in range(100):
        n = int(r.integers(2, 201))
        y = r.integers(0, 2, n)
        y[0], y[1] = 0, 1
        s = np.round(r.random(n), int(r.integers(1, 4)))  # rounding forces ties
        assert metrics.roc_auc(s, y) == pytest.approx(brute_auc(s, y), abs=1e-12)


scores_labels = st.integers(2, 60).flatmap(lambda n: st.tuples(
    st.lists(st.integers(-40, 40).map(lambda k: k / 8), min_size=n, max_size=n),
    st.lists(st.integers(0, 1), min_size=n, max_size=n).filter(lambda l: 0 < sum(l) < len(l)),
))


@settings(max_examples=80, deadline=None)
@given(scores_labels)
def test_auc_monotone_transform_invariant(sl):
    s, y = np.array(sl[0]), np.array(sl[1])
    assert metrics.roc_auc(np.exp(s) * 3 + 1, y) == pytest.approx(metrics.roc_auc(s, y), abs=1e-12)


@settings(max_examples=80, deadline=None)
@given(scores_labels)
def test_auc_label_flip(sl):
    s, y = np.array(sl[0]), np.array(sl[1])
    # with the half-tie convention the flip identity holds with ties too
    assert metrics.roc_auc(-s, 1 - y) == pytest.approx(metrics.roc_auc(s, y), abs=1e-12)
    assert metrics.roc_auc(s, 1 - y) == pytest.approx(1 - metrics.roc_auc(s, y), abs=1e-12)


def test_report_columns():
    row = metrics.evaluate([0.9, 0.2, 0.7, 0.4], [1, 0, 1, 0])
    assert tuple(row) == ("Balanced Acc.", "Sensitivity", "Specificity", "ROC AUC")
    text = metrics.format_report({"x": row})
    assert text.splitlines()[0].split(" | ") == ["Method", "Balanced Acc.", "Sensitivity",
                                                  "Specificity", "ROC AUC"]
