"""Binary classification metrics with the 'alert' class (label 1) positive."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import ContractViolationError, MetricUndefinedError


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    auroc: float
    tp: int
    fp: int
    tn: int
    fn: int
    degenerate: tuple[str, ...] = field(default_factory=tuple)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "auroc": self.auroc,
            "confusion": {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn},
            "degenerate": list(self.degenerate),
        }


def compute_auroc(scores, labels) -> float:
    """P(score of a positive > score of a negative), ties counted half.

    Computed via midranks, which equals the explicit sum over all
    positive-negative pairs.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ContractViolationError("scores and labels must be equal-length vectors")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError(
            f"AUROC needs both classes, got {n_pos} positives and {n_neg} negatives"
        )
    ranks = rankdata(scores)
    pos_rank_sum = ranks[labels == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def compute_metrics(scores, predictions, labels) -> MetricsReport:
    """Confusion-based metrics plus AUROC from positive-class scores.

    Zero-denominator metrics report 0.0 and are named in `degenerate`
    instead of producing NaN.
    """
    scores = np.asarray(scores, dtype=np.float64)
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if not (len(scores) == len(predictions) == len(labels)):
        raise ContractViolationError("scores, predictions, labels must align")
    if len(labels) == 0:
        raise ContractViolationError("cannot compute metrics on an empty set")
    if not np.isin(labels, (0, 1)).all() or not np.isin(predictions, (0, 1)).all():
        raise ContractViolationError("labels and predictions must be binary (0/1)")

    tp = int(((predictions == 1) & (labels == 1)).sum())
    fp = int(((predictions == 1) & (labels == 0)).sum())
    tn = int(((predictions == 0) & (labels == 0)).sum())
    fn = int(((predictions == 0) & (labels == 1)).sum())

    degenerate: list[str] = []

    def ratio(num: int, den: int, name: str) -> float:
        if den == 0:
            degenerate.append(name)
            return 0.0
        return num / den

    accuracy = (tp + tn) / len(labels)
    precision = ratio(tp, tp + fp, "precision")
    recall = ratio(tp, tp + fn, "recall")
    if precision + recall == 0.0:
        degenerate.append("f1")
        f1 = 0.0
    else:
        f1 = 2.0 * precision * recall / (precision + recall)
    try:
        auroc = compute_auroc(scores, labels)
    except MetricUndefinedError:
        degenerate.append("auroc")
        auroc = 0.0

    return MetricsReport(
        accuracy=accuracy,
        precision=precision,
        recall=recall,
        f1=f1,
        auroc=auroc,
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
        degenerate=tuple(degenerate),
    )
