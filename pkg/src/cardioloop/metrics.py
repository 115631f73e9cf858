"""Evaluation metrics: confusion-matrix statistics, ROC AUC and average precision.

Two AUC routines are provided on purpose: the exact trapezoidal area over all
distinct score thresholds, and a fixed-grid approximation, because the two
conventions give visibly different numbers on small test sets.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .signals import ParameterError


def _validate_binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape or scores.ndim != 1 or scores.size == 0:
        raise ParameterError("scores and labels must be equal-length 1-D")
    pos = labels == 1
    if not pos.any() or pos.all():
        raise ParameterError("both classes must be present")
    return scores, pos


def _roc_points(scores, pos):
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], pos[order]
    tps = np.cumsum(y)
    fps = np.cumsum(~y)
    # keep only the last index of each distinct score (threshold boundaries)
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tpr = np.r_[0.0, tps[last] / tps[-1]]
    fpr = np.r_[0.0, fps[last] / fps[-1]]
    return fpr, tpr


def roc_auc(scores, labels) -> float:
    """Exact trapezoidal area under the ROC over all distinct thresholds."""
    scores, pos = _validate_binary(scores, labels)
    fpr, tpr = _roc_points(scores, pos)
    return float(np.trapezoid(tpr, fpr))


def roc_auc_fixed(scores, labels, n_thresholds: int = 200) -> float:
    """AUC from a fixed, evenly spaced threshold grid over the score range."""
    if n_thresholds < 2:
        raise ParameterError("need at least 2 thresholds")
    scores, pos = _validate_binary(scores, labels)
    n_pos, n_neg = pos.sum(), (~pos).sum()
    thresholds = np.linspace(scores.max(), scores.min(), n_thresholds)
    pred = scores[None, :] >= thresholds[:, None]
    tpr = (pred & pos).sum(axis=1) / n_pos
    fpr = (pred & ~pos).sum(axis=1) / n_neg
    fpr = np.r_[0.0, fpr, 1.0]
    tpr = np.r_[0.0, tpr, 1.0]
    return float(np.trapezoid(tpr, fpr))


def average_precision(scores, labels) -> float:
    """Step-interpolated area under the precision-recall curve."""
    scores, pos = _validate_binary(scores, labels)
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], pos[order]
    tps = np.cumsum(y)
    fps = np.cumsum(~y)
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    precision = tps[last] / (tps[last] + fps[last])
    recall = tps[last] / tps[-1]
    recall_steps = np.diff(np.r_[0.0, recall])
    return float(np.sum(recall_steps * precision))


@dataclass
class ConfusionMetrics:
    confusion: np.ndarray
    accuracy: float
    precision: np.ndarray     # per class, one-vs-rest
    recall: np.ndarray
    specificity: np.ndarray
    f1: np.ndarray
    undefined: list[str] = field(default_factory=list)

    @property
    def macro_precision(self) -> float:
        return float(self.precision.mean())

    @property
    def macro_recall(self) -> float:
        return float(self.recall.mean())

    @property
    def macro_specificity(self) -> float:
        return float(self.specificity.mean())

    @property
    def macro_f1(self) -> float:
        return float(self.f1.mean())


def metrics_from_confusion(confusion) -> ConfusionMetrics:
    """Per-class one-vs-rest statistics; zero-denominator cases report 0 and are flagged."""
    c = np.asarray(confusion, dtype=np.int64)
    if c.ndim != 2 or c.shape[0] != c.shape[1] or np.any(c < 0):
        raise ParameterError("confusion must be a square nonnegative matrix")
    total = c.sum()
    if total == 0:
        raise ParameterError("confusion matrix is empty")
    k = c.shape[0]
    tp = np.diag(c).astype(float)
    fn = c.sum(axis=1) - tp
    fp = c.sum(axis=0) - tp
    tn = total - tp - fn - fp

    undefined: list[str] = []

    def _safe(num, den, name):
        out = np.zeros(k)
        for i in range(k):
            if den[i] == 0:
                undefined.append(f"{name}[{i}]")
            else:
                out[i] = num[i] / den[i]
        return out

    precision = _safe(tp, tp + fp, "precision")
    recall = _safe(tp, tp + fn, "recall")
    specificity = _safe(tn, tn + fp, "specificity")
    f1 = np.zeros(k)
    for i in range(k):
        if precision[i] + recall[i] > 0:
            f1[i] = 2 * precision[i] * recall[i] / (precision[i] + recall[i])
        else:
            undefined.append(f"f1[{i}]")
    return ConfusionMetrics(c, float(tp.sum() / total), precision, recall,
                            specificity, f1, undefined)


@dataclass
class MetricsReport:
    avg_time_s: float
    accuracy: float
    specificity: float
    precision: float
    recall: float
    f1: float
    prc: float
    auc: float
    confusion: np.ndarray
    undefined: list[str] = field(default_factory=list)

    def to_table_json(self) -> dict:
        """Row shaped like the reference results tables, plus the raw matrix."""
        return {
            "Avg Time (s)": self.avg_time_s,
            "Accuracy": self.accuracy,
            "Specificity": self.specificity,
            "Precision": self.precision,
            "Recall": self.recall,
            "F1 Score": self.f1,
            "PRC": self.prc,
            "AUC": self.auc,
            "Confusion Matrix": self.confusion.tolist(),
            "Undefined": list(self.undefined),
        }
