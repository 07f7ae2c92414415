import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lepdnet.errors import ConfigError, DomainError
from lepdnet.pipeline.metrics import (
    aggregate, compute_metrics, confusion_matrix, pr_curve, roc_curve, roc_pr_curves, table_row,
)

import oracles


def test_two_class_toy():
    m = compute_metrics([0, 1, 1, 1], [0, 0, 1, 1], n_classes=2)
    assert m["Acc"] == pytest.approx(75.0, abs=1e-9)
    assert m["Pre"] == pytest.approx(250 / 3, abs=1e-9)
    assert m["Sen"] == pytest.approx(75.0, abs=1e-9)
    assert m["F1"] == pytest.approx(100 * (2 / 3 + 0.8) / 2, abs=1e-9)
    assert m["F1"] == pytest.approx(73.33333333333333, abs=1e-9)


def test_single_class_predictions():
    labels = np.repeat(np.arange(5), 4)
    m = compute_metrics(np.zeros(20, int), labels)
    assert m["Acc"] == pytest.approx(20.0) and m["Sen"] == pytest.approx(20.0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=1, max_size=40))
def test_macro_metrics_match_counting_oracle(pairs):
    preds, labels = zip(*pairs)
    m = compute_metrics(preds, labels)
    ref = oracles.confusion_metrics(preds, labels, range(5))
    assert m["Pre"] == pytest.approx(100 * np.mean([ref[c][0] for c in range(5)]), abs=1e-9)
    assert m["Sen"] == pytest.approx(100 * np.mean([ref[c][1] for c in range(5)]), abs=1e-9)
    assert m["F1"] == pytest.approx(100 * np.mean([ref[c][2] for c in range(5)]), abs=1e-9)
    assert m["Acc"] == pytest.approx(100 * np.mean(np.array(preds) == np.array(labels)), abs=1e-9)
    assert confusion_matrix(preds, labels).sum() == len(pairs)


def test_micro_and_weighted():
    m = compute_metrics([0, 1, 1, 1], [0, 0, 1, 1], n_classes=2, average="micro")
    assert m["Pre"] == m["Acc"] == 75.0
    w = compute_metrics([0, 1, 1, 1], [0, 0, 1, 1], n_classes=2, average="weighted")
    assert w["Sen"] == pytest.approx(75.0)
    with pytest.raises(ConfigError):
        compute_metrics([0], [0], average="bogus")


def test_metric_errors():
    with pytest.raises(ConfigError):
        compute_metrics([], [])
    with pytest.raises(DomainError):
        compute_metrics([7], [0])


def test_auc_toy():
    fpr, tpr, thr, auc = roc_curve([0.9, 0.8, 0.4, 0.3], [1, 0, 1, 0])
    assert auc == pytest.approx(0.75, abs=1e-12)
    assert fpr[0] == 0 and tpr[-1] == 1 and np.isinf(thr[0])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.booleans()), min_size=2, max_size=30))
def test_auc_equals_pairwise_probability(rows):
    scores = [s / 6 for s, _ in rows]
    pos = [p for _, p in rows]
    if all(pos) or not any(pos):
        with pytest.raises(DomainError):
            roc_curve(scores, pos)
        return
    assert roc_curve(scores, pos)[3] == pytest.approx(oracles.auc_pairs(scores, pos), abs=1e-12)


def test_average_precision_perfect_and_stepwise():
    assert pr_curve([0.9, 0.8, 0.1], [1, 1, 0])[3] == pytest.approx(1.0)
    # ranks: + - + -> AP = (1/2)(1) + (1/2)(2/3)
    assert pr_curve([0.9, 0.8, 0.7], [1, 0, 1])[3] == pytest.approx(0.5 + 1 / 3)


def test_curves_skip_degenerate_class():
    probs = np.full((4, 5), 0.2)
    probs[:, 0] = [0.9, 0.1, 0.8, 0.2]
    cs = roc_pr_curves(probs, [0, 1, 0, 1])
    assert set(cs.curves) == {"US", "PS"}
    assert {s["label"] for s in cs.skipped} == {"RS", "OC", "NS"}
    assert cs.curves["US"].auc == 1.0
    assert cs.curves["US"].roc_thresholds[0] is None


def test_aggregate_and_row():
    agg = aggregate([{"Acc": 80, "Pre": 70, "F1": 60, "Sen": 50}, {"Acc": 90, "Pre": 70, "F1": 70, "Sen": 50}])
    assert agg["mean"]["Acc"] == 85
    assert agg["std"]["Acc"] == pytest.approx(np.std([80, 90], ddof=1))
    assert agg["std"]["Pre"] == 0
    assert table_row(agg).startswith("Acc 85.00±7.07")
