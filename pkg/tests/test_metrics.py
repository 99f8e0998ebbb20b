"""roc_auc against the brute-force pairwise oracle and its symmetries."""
from __future__ import annotations

import numpy as np
import pytest

from seqscore.metrics import SingleClassError, roc_auc


def brute_force_auc(scores, labels):
    """O(P*N) oracle: concordant pairs plus half the ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    diff = pos[:, None] - neg[None, :]
    wins = np.count_nonzero(diff > 0) + 0.5 * np.count_nonzero(diff == 0)
    return wins / (pos.size * neg.size)


def test_perfect_ordering():
    assert roc_auc([0.9, 0.1], [1, 0]) == 1.0


def test_all_tied_scores_give_half():
    assert roc_auc([0.4] * 10, [1, 0] * 5) == 0.5


def test_reversed_ordering_gives_zero():
    assert roc_auc([0.1, 0.9], [1, 0]) == 0.0


@pytest.mark.parametrize("seed", range(8))
def test_matches_brute_force_with_ties(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(20, 400))
    # quantized scores force plenty of ties
    scores = np.round(rng.random(n), 2)
    labels = rng.integers(0, 2, n)
    if labels.sum() in (0, n):
        labels[0] = 1 - labels[0]
    assert abs(roc_auc(scores, labels) - brute_force_auc(scores, labels)) < 1e-12


def test_invariant_under_strictly_increasing_transform():
    rng = np.random.default_rng(42)
    scores = rng.random(100)
    labels = rng.integers(0, 2, 100)
    labels[0], labels[1] = 0, 1
    a = roc_auc(scores, labels)
    b = roc_auc(np.exp(3.0 * scores) + 7.0, labels)
    assert abs(a - b) < 1e-15


def test_label_swap_symmetry_tie_free():
    rng = np.random.default_rng(3)
    scores = rng.permutation(np.arange(50, dtype=float))  # no ties
    labels = rng.integers(0, 2, 50)
    labels[0], labels[1] = 0, 1
    assert abs(roc_auc(scores, labels) + roc_auc(scores, 1 - labels) - 1.0) < 1e-12


def test_single_class_errors():
    with pytest.raises(SingleClassError):
        roc_auc([0.1, 0.2], [1, 1])
    with pytest.raises(SingleClassError):
        roc_auc([0.1, 0.2], [0, 0])


def test_bad_labels_rejected():
    with pytest.raises(ValueError):
        roc_auc([0.1, 0.2], [1, 2])
