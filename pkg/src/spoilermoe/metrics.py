"""Binary classification metrics: F1, ROC-AUC, accuracy."""

from __future__ import annotations

import numpy as np


def _average_ranks(x):
    """1-based ranks with ties sharing their average rank."""
    _, inv, counts = np.unique(x, return_inverse=True, return_counts=True)
    cum = np.cumsum(counts)
    return cum[inv] - (counts[inv] - 1) / 2.0


def roc_auc(scores, labels):
    """Rank-based AUC with average-rank tie handling; None if single-class."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = _average_ranks(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def evaluate_metrics(scores, labels, threshold=0.5):
    """scores are class-1 probabilities; F1 counts label 1 (spoiler) as positive."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    preds = (scores >= threshold).astype(int)
    acc = float((preds == labels).mean()) if len(labels) else None
    tp = int(((preds == 1) & (labels == 1)).sum())
    fp = int(((preds == 1) & (labels == 0)).sum())
    fn = int(((preds == 0) & (labels == 1)).sum())
    if 2 * tp + fp + fn == 0:
        f1 = 0.0
    else:
        f1 = 2.0 * tp / (2.0 * tp + fp + fn)
    return {"f1": float(f1), "auc": roc_auc(scores, labels), "acc": acc}
