"""Binary classification metrics: confusion rates, ROC AUC, average precision."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from .predictions import PredictionSet

THRESHOLD_METRICS = ("f1", "accuracy", "precision", "recall", "specificity")
RANK_METRICS = ("auc", "pr")
ALL_METRICS = ("f1", "auc", "pr", "accuracy", "precision", "recall", "specificity")


class UndefinedMetricError(ValueError):
    """The metric is undefined on this input (e.g. a single class)."""


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    fn: int
    tn: int

    def __add__(self, other: Confusion) -> Confusion:
        return Confusion(self.tp + other.tp, self.fp + other.fp,
                         self.fn + other.fn, self.tn + other.tn)


@dataclass(frozen=True)
class MetricReport:
    f1: float
    accuracy: float
    precision: float
    recall: float
    specificity: float
    auc: float | None = None
    pr: float | None = None

    def as_dict(self) -> dict:
        return asdict(self)


def _ratio(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    out = np.zeros(np.broadcast(num, den).shape)
    np.divide(num, den, out=out, where=den > 0)
    return out


def rates_from_counts(tp, fp, fn, tn) -> dict[str, np.ndarray]:
    """Threshold metrics from (arrays of) confusion counts.

    Zero denominators yield 0, so a classifier that never predicts positive
    gets precision 0 and F1 0.
    """
    precision = _ratio(tp, np.add(tp, fp))
    recall = _ratio(tp, np.add(tp, fn))
    f1 = _ratio(2 * precision * recall, precision + recall)
    total = np.add(np.add(tp, fp), np.add(fn, tn))
    return {
        "f1": f1,
        "accuracy": _ratio(np.add(tp, tn), total),
        "precision": precision,
        "recall": recall,
        "specificity": _ratio(tn, np.add(tn, fp)),
    }


def confusion(preds: PredictionSet, threshold: float = 0.5) -> Confusion:
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    pos = preds.probability >= threshold
    y = preds.label == 1
    return Confusion(int(np.sum(pos & y)), int(np.sum(pos & ~y)),
                     int(np.sum(~pos & y)), int(np.sum(~pos & ~y)))


def confusion_metrics(preds: PredictionSet, threshold: float = 0.5) -> MetricReport:
    """Threshold-dependent metrics; probabilities >= threshold are positive."""
    c = confusion(preds, threshold)
    rates = rates_from_counts(c.tp, c.fp, c.fn, c.tn)
    return MetricReport(**{k: float(v) for k, v in rates.items()})


def _check_two_classes(label):
    n_pos = int(np.sum(label == 1))
    if n_pos == 0 or n_pos == len(label):
        raise UndefinedMetricError("ROC AUC needs both classes present")
    return n_pos, len(label) - n_pos


def roc_auc(preds: PredictionSet) -> float:
    """Mann-Whitney AUC: P(positive outranks negative), ties count one half."""
    return roc_auc_score(preds.label, preds.probability)


def roc_auc_score(label, score) -> float:
    label = np.asarray(label)
    n_pos, n_neg = _check_two_classes(label)
    ranks = rankdata(np.asarray(score, dtype=np.float64), method="average")
    u = ranks[label == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pr_auc(preds: PredictionSet) -> float:
    """Step-wise average precision; tied scores form a single threshold."""
    return average_precision(preds.label, preds.probability)


def average_precision(label, score) -> float:
    label = np.asarray(label)
    if not np.any(label == 1):
        raise UndefinedMetricError("average precision needs a positive row")
    recall, precision = _pr_points(label, np.asarray(score, dtype=np.float64))
    return float(np.sum(np.diff(recall) * precision[1:]))


def _grouped_counts(label, score, weights=None):
    """Positive/negative weight per distinct score, descending score order."""
    if weights is None:
        weights = np.ones(len(label), dtype=np.int64)
    uniq, inv = np.unique(score, return_inverse=True)
    pos = np.bincount(inv, weights=weights * (label == 1), minlength=len(uniq))
    neg = np.bincount(inv, weights=weights * (label != 1), minlength=len(uniq))
    keep = (pos + neg) > 0  # rows left out of a resample carry no threshold
    return uniq[keep][::-1], pos[keep][::-1], neg[keep][::-1]


def _pr_points(label, score, weights=None):
    _, pos, neg = _grouped_counts(label, score, weights)
    tp = np.cumsum(pos)
    fp = np.cumsum(neg)
    recall = np.concatenate([[0.0], tp / tp[-1]])
    precision = np.concatenate([[1.0], tp / (tp + fp)])
    return recall, precision


def roc_curve(label, score, weights=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(fpr, tpr, thresholds), one point per distinct score plus the origin."""
    label = np.asarray(label)
    thr, pos, neg = _grouped_counts(label, np.asarray(score, dtype=np.float64), weights)
    tpr = np.concatenate([[0.0], np.cumsum(pos) / pos.sum()])
    fpr = np.concatenate([[0.0], np.cumsum(neg) / neg.sum()])
    return fpr, tpr, np.concatenate([[np.inf], thr])


def pr_curve(label, score, weights=None) -> tuple[np.ndarray, np.ndarray]:
    """(recall, precision) step points, starting at (0, 1)."""
    return _pr_points(np.asarray(label), np.asarray(score, dtype=np.float64), weights)


def metric_report(preds: PredictionSet, threshold: float = 0.5) -> MetricReport:
    """All seven metrics; rank metrics are None when only one class is present."""
    base = confusion_metrics(preds, threshold)
    try:
        auc, pr = roc_auc(preds), pr_auc(preds)
    except UndefinedMetricError:
        auc = pr = None
    return MetricReport(base.f1, base.accuracy, base.precision, base.recall,
                        base.specificity, auc, pr)
