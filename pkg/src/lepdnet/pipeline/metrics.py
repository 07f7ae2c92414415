"""Classification metrics (in percent) and one-vs-rest ROC / PR curves."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..dataio import LABELS
from ..errors import ConfigError, DomainError

log = logging.getLogger(__name__)

AVERAGES = ("macro", "micro", "weighted")


def confusion_matrix(predictions, labels, n_classes: int = len(LABELS)) -> np.ndarray:
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape or predictions.size == 0:
        raise ConfigError("predictions and labels must be aligned and nonempty")
    for name, arr in (("label", labels), ("prediction", predictions)):
        if arr.min() < 0 or arr.max() >= n_classes:
            raise DomainError(f"{name} index outside [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (labels, predictions), 1)
    return cm


def _safe_div(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def compute_metrics(predictions, labels, n_classes: int = len(LABELS), average: str = "macro") -> dict:
    """Acc, Pre, F1 and Sen in percent.

    Macro averaging runs over every class index in ``range(n_classes)``;
    a class that is never predicted contributes precision 0.
    """
    if average not in AVERAGES:
        raise ConfigError(f"average must be one of {AVERAGES}, got {average!r}")
    cm = confusion_matrix(predictions, labels, n_classes)
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(1)
    predicted = cm.sum(0)
    acc = tp.sum() / cm.sum()
    if average == "micro":
        pre = sen = f1 = acc
    else:
        pre_c = _safe_div(tp, predicted)
        sen_c = _safe_div(tp, support)
        f1_c = _safe_div(2 * pre_c * sen_c, pre_c + sen_c)
        w = np.full(n_classes, 1.0 / n_classes) if average == "macro" else support / support.sum()
        pre, sen, f1 = float(w @ pre_c), float(w @ sen_c), float(w @ f1_c)
    return {"Acc": 100 * float(acc), "Pre": 100 * float(pre), "F1": 100 * float(f1), "Sen": 100 * float(sen)}


def aggregate(fold_metrics: list[dict]) -> dict:
    keys = ("Acc", "Pre", "F1", "Sen")
    arr = np.array([[m[k] for k in keys] for m in fold_metrics], dtype=np.float64)
    std = arr.std(axis=0, ddof=1) if len(arr) > 1 else np.zeros(len(keys))
    return {"mean": dict(zip(keys, arr.mean(axis=0).tolist())), "std": dict(zip(keys, std.tolist()))}


def table_row(agg: dict) -> str:
    return "  ".join(f"{k} {agg['mean'][k]:.2f}±{agg['std'][k]:.2f}" for k in ("Acc", "Pre", "F1", "Sen"))


# ---------------------------------------------------------------- curves

@dataclass
class Curve:
    label: str
    fpr: list[float]
    tpr: list[float]
    roc_thresholds: list[float]
    precision: list[float]
    recall: list[float]
    pr_thresholds: list[float]
    auc: float
    ap: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class CurveSet:
    curves: dict[str, Curve] = field(default_factory=dict)
    skipped: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"curves": {k: c.to_dict() for k, c in self.curves.items()}, "skipped": self.skipped}


def binary_curve_points(scores, positives):
    """Cumulative (tp, fp) counts at each distinct threshold, highest first."""
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    order = np.argsort(-scores, kind="mergesort")
    s, p = scores[order], positives[order]
    last_of_group = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp = np.cumsum(p)[last_of_group]
    fp = np.cumsum(~p)[last_of_group]
    return s[last_of_group], tp, fp


def roc_curve(scores, positives):
    thresholds, tp, fp = binary_curve_points(scores, positives)
    P, N = tp[-1], fp[-1]
    if P == 0 or N == 0:
        raise DomainError("ROC needs at least one positive and one negative")
    fpr = np.r_[0.0, fp / N]
    tpr = np.r_[0.0, tp / P]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return fpr, tpr, np.r_[np.inf, thresholds], auc


def pr_curve(scores, positives):
    """Precision/recall per threshold and the step-wise average precision."""
    thresholds, tp, fp = binary_curve_points(scores, positives)
    P = tp[-1]
    if P == 0:
        raise DomainError("PR curve needs at least one positive")
    precision = tp / (tp + fp)
    recall = tp / P
    ap = float(np.sum(np.diff(np.r_[0.0, recall]) * precision))
    return np.r_[1.0, precision], np.r_[0.0, recall], thresholds, ap


def roc_pr_curves(probabilities, labels, class_names=LABELS) -> CurveSet:
    probabilities = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    out = CurveSet()
    for k, name in enumerate(class_names):
        pos = labels == k
        if pos.all() or not pos.any():
            reason = "no positives" if not pos.any() else "no negatives"
            log.warning("skipping curve for class %s: %s", name, reason)
            out.skipped.append({"label": name, "reason": reason})
            continue
        fpr, tpr, rthr, auc = roc_curve(probabilities[:, k], pos)
        prec, rec, pthr, ap = pr_curve(probabilities[:, k], pos)
        out.curves[name] = Curve(name, fpr.tolist(), tpr.tolist(), [None if np.isinf(t) else float(t) for t in rthr],
                                 prec.tolist(), rec.tolist(), pthr.tolist(), auc, ap)
    return out
