"""Inference strategies over the per-branch outputs of an unseen-domain sample.

When a sample from a new domain is pushed through all N branches of a
domain-specific model, the final prediction is formed by one of:

  max_logit / max_prob   -- class of the single largest entry across branches
  avg_logit / avg_prob   -- elementwise mean across branches, then argmax
  select_wasserstein /
  select_euclidean       -- pick one branch per layer by statistic distance
                            inside a single forward pass

Every strategy also yields a length-C score vector so threshold-free metrics
can be computed; scores are probabilities except for max_prob, whose
elementwise maximum need not sum to one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import softmax_np
from .errors import ContractViolationError, DimensionError, ParameterError
from .norms import ChannelStats

AGGREGATE_METHODS = ("max_logit", "max_prob", "avg_logit", "avg_prob")
SELECTION_METHODS = ("select_wasserstein", "select_euclidean")
ALL_METHODS = AGGREGATE_METHODS + SELECTION_METHODS


def parse_method(name: str) -> str:
    if name not in ALL_METHODS:
        raise ParameterError(
            f"unknown inference method {name!r}; expected one of {ALL_METHODS}"
        )
    return name


@dataclass
class BranchOutputs:
    """Per-branch logits [N, C] and their softmax probabilities [N, C]."""

    logits: np.ndarray
    probs: np.ndarray

    @classmethod
    def from_logits(cls, logits: np.ndarray) -> "BranchOutputs":
        logits = np.asarray(logits, dtype=np.float64)
        if logits.ndim != 2 or logits.shape[0] < 1:
            raise ContractViolationError(
                f"branch outputs need an [N, C] logit matrix with N >= 1, got {logits.shape}"
            )
        return cls(logits=logits, probs=softmax_np(logits, axis=1))


def aggregate(outputs: BranchOutputs, method: str) -> tuple[int, np.ndarray]:
    """Reduce branch outputs to (predicted class, score vector of length C).

    max_* takes the elementwise maximum over branches (its argmax is the
    coordinate of the single largest entry); avg_* takes the elementwise
    mean. Logit-valued scores are mapped through softmax so every method
    returns probability-scaled scores except max_prob, which keeps the raw
    per-class maxima. Argmax ties break toward the lowest class index.
    """
    if method not in AGGREGATE_METHODS:
        raise ParameterError(f"unknown aggregation method {method!r}")
    if outputs.logits.shape[0] < 1:
        raise ContractViolationError("cannot aggregate empty branch outputs")
    if method == "max_logit":
        scores = softmax_np(outputs.logits.max(axis=0))
    elif method == "max_prob":
        scores = outputs.probs.max(axis=0)
    elif method == "avg_logit":
        scores = softmax_np(outputs.logits.mean(axis=0))
    else:
        scores = outputs.probs.mean(axis=0)
    return int(np.argmax(scores)), scores


def branch_distance_wasserstein(a: ChannelStats, b: ChannelStats) -> float:
    """Sum over channels of |mean difference| plus |std difference|.

    Per-channel statistics are treated as point masses, for which the
    1-Wasserstein distance reduces to the absolute difference.
    """
    if a.mean.shape != b.mean.shape:
        raise DimensionError(
            f"channel counts differ: {a.mean.shape} vs {b.mean.shape}"
        )
    return float(np.abs(a.mean - b.mean).sum() + np.abs(a.std - b.std).sum())


def branch_distance_euclidean(a: ChannelStats, b: ChannelStats) -> float:
    """Sum over channels of sqrt(mean difference^2 + std difference^2)."""
    if a.mean.shape != b.mean.shape:
        raise DimensionError(
            f"channel counts differ: {a.mean.shape} vs {b.mean.shape}"
        )
    return float(np.sqrt((a.mean - b.mean) ** 2 + (a.std - b.std) ** 2).sum())


_DISTANCES = {
    "wasserstein": branch_distance_wasserstein,
    "euclidean": branch_distance_euclidean,
    "select_wasserstein": branch_distance_wasserstein,
    "select_euclidean": branch_distance_euclidean,
}


def resolve_distance(metric: str):
    if metric not in _DISTANCES:
        raise ParameterError(
            f"unknown selection metric {metric!r}; expected wasserstein or euclidean"
        )
    return _DISTANCES[metric]


def predict_with_selection(model, x, metric: str):
    """Classify one instance with per-layer branch selection.

    Returns a SelectionResult carrying the predicted class, the softmax
    probabilities of the final logits, and the branch index chosen at each
    normalization layer.
    """
    resolve_distance(metric)
    return model.forward_selective(x, metric)
