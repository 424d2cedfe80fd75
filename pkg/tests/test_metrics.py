"""F1/accuracy hand values and AUC vs the O(n^2) pairwise oracle."""

import numpy as np

from spoilermoe.metrics import evaluate_metrics, roc_auc


def pairwise_auc_oracle(scores, labels):
    """Direct definition: P(score_pos > score_neg) + 0.5 P(tie)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if len(pos) == 0 or len(neg) == 0:
        return None
    wins = ties = 0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1
            elif p == n:
                ties += 1
    return (wins + 0.5 * ties) / (len(pos) * len(neg))


def test_hand_example():
    m = evaluate_metrics([0.9, 0.8, 0.2, 0.1], [1, 0, 0, 0])
    assert abs(m["acc"] - 0.75) < 1e-12
    assert abs(m["f1"] - 2.0 / 3.0) < 1e-12


def test_perfect_ranking_auc_one():
    m = evaluate_metrics([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])
    assert m["auc"] == 1.0


def test_single_class_auc_none():
    m = evaluate_metrics([0.9, 0.8], [1, 1])
    assert m["auc"] is None and m["acc"] is not None


def test_against_pairwise_oracle_20_random_cases():
    rng = np.random.default_rng(0)
    for case in range(20):
        n = int(rng.integers(5, 60))
        # quantized scores so ties actually occur
        scores = np.round(rng.random(n), 1)
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        fast = roc_auc(scores, labels)
        slow = pairwise_auc_oracle(scores, labels)
        assert abs(fast - slow) <= 1e-9, f"case {case}"


def test_all_ties_auc_half():
    assert roc_auc([0.5, 0.5, 0.5, 0.5], [1, 0, 1, 0]) == 0.5


def test_f1_zero_when_nothing_predicted_or_present():
    m = evaluate_metrics([0.1, 0.2], [0, 0])
    assert m["f1"] == 0.0
