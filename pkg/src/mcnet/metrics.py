"""Prediction and imputation metrics."""
from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .errors import MetricError


def auc(scores, labels):
    """Mann-Whitney estimate of P(score_pos > score_neg), ties counted as one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs at least one positive and one negative")
    ranks = rankdata(scores)  # average ranks resolve ties
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def accuracy(prob_pos, labels, threshold=0.5):
    pred = np.asarray(prob_pos) >= threshold
    return float(np.mean(pred == np.asarray(labels).astype(bool)))


def balanced_accuracy(prob_pos, labels, threshold=0.5):
    """Mean of the per-class recalls."""
    pred = np.asarray(prob_pos) >= threshold
    labels = np.asarray(labels).astype(bool)
    recalls = [np.mean(pred[labels == cls] == cls) for cls in (False, True) if np.any(labels == cls)]
    if not recalls:
        raise MetricError("balanced accuracy of an empty set")
    return float(np.mean(recalls))


def masked_errors(x, x_hat, mask):
    """``(mae, rmse)`` between rows of ``x`` and ``x_hat`` where ``mask`` is 1.

    ``x``/``x_hat`` are ``(..., D)``, ``mask`` has the leading shape.  Rows
    with mask 0 are never read.
    """
    m = np.asarray(mask) > 0
    if not m.any():
        raise MetricError("no present entries to score")
    diff = np.asarray(x)[m] - np.asarray(x_hat)[m]
    return float(np.mean(np.abs(diff))), float(np.sqrt(np.mean(diff * diff)))
