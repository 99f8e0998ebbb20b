"""ROC-AUC via the rank-sum (Mann-Whitney) statistic with average tie ranks."""
from __future__ import annotations

import numpy as np


class SingleClassError(ValueError):
    """Metric or loss undefined because only one class is present."""


def roc_auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative,
    counting ties as one half. O(n log n) via sorted average ranks."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("roc_auc: scores and labels must be equal-length 1-D arrays")
    n_pos = int(np.count_nonzero(labels == 1))
    n_neg = int(np.count_nonzero(labels == 0))
    if n_pos + n_neg != labels.size:
        raise ValueError("roc_auc: labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError("roc_auc needs at least one positive and one negative")
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    _, inverse, counts = np.unique(sorted_scores, return_inverse=True, return_counts=True)
    cum = np.cumsum(counts)
    avg_rank = (cum - counts + 1 + cum) / 2.0
    ranks = np.empty(scores.size)
    ranks[order] = avg_rank[inverse]
    pos_rank_sum = ranks[labels == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))
