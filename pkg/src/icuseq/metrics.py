"""Ranking metrics: AUROC (Mann-Whitney with tie correction) and AUPRC
(step-wise average precision), plus macro/micro aggregation.

Degenerate inputs (a single class present) make the metric undefined and
return None; aggregations skip undefined entries.
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "auroc",
    "auprc",
    "average_ranks",
    "one_vs_rest_metrics",
    "multilabel_metrics",
    "softmax_probs",
]


def average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    sx = x[order]
    i = 0
    while i < len(sx):
        j = i
        while j + 1 < len(sx) and sx[j + 1] == sx[i]:
            j += 1
        avg = 0.5 * (i + j) + 1.0
        ranks[order[i : j + 1]] = avg
        i = j + 1
    return ranks


def auroc(scores, labels) -> float | None:
    """P(score_pos > score_neg) + 0.5 P(equal), via the rank-sum identity."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError(f"scores/labels length mismatch: {scores.shape} vs {labels.shape}")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = average_ranks(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores, labels) -> float | None:
    """Average precision over ranked score thresholds.

    Tied scores form a single threshold step. With all scores equal this
    reduces to the prevalence.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError(f"scores/labels length mismatch: {scores.shape} vs {labels.shape}")
    n_pos = int((labels == 1).sum())
    if n_pos == 0 or n_pos == len(labels):
        return None if n_pos == 0 else 1.0
    order = np.argsort(-scores, kind="stable")
    s_sorted = scores[order]
    y_sorted = labels[order]
    ap = 0.0
    tp = 0
    seen = 0
    prev_recall = 0.0
    i = 0
    n = len(scores)
    while i < n:
        j = i
        while j + 1 < n and s_sorted[j + 1] == s_sorted[i]:
            j += 1
        group_pos = int((y_sorted[i : j + 1] == 1).sum())
        tp += group_pos
        seen = j + 1
        recall = tp / n_pos
        precision = tp / seen
        ap += (recall - prev_recall) * precision
        prev_recall = recall
        i = j + 1
    return float(ap)


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _aggregate(scores_mat: np.ndarray, onehot: np.ndarray) -> dict[str, float | None]:
    """Macro = unweighted mean over defined columns; micro = pooled flatten."""
    per_auroc = []
    per_auprc = []
    for c in range(onehot.shape[1]):
        per_auroc.append(auroc(scores_mat[:, c], onehot[:, c]))
        per_auprc.append(auprc(scores_mat[:, c], onehot[:, c]))
    defined_roc = [v for v in per_auroc if v is not None]
    defined_prc = [v for v in per_auprc if v is not None]
    return {
        "auroc_macro": float(np.mean(defined_roc)) if defined_roc else None,
        "auprc_macro": float(np.mean(defined_prc)) if defined_prc else None,
        "auroc_micro": auroc(scores_mat.reshape(-1), onehot.reshape(-1)),
        "auprc_micro": auprc(scores_mat.reshape(-1), onehot.reshape(-1)),
        "per_class_auroc": per_auroc,
        "per_class_auprc": per_auprc,
    }


def one_vs_rest_metrics(probs: np.ndarray, labels: np.ndarray, n_classes: int) -> dict:
    """Multiclass metrics from (N, C) class probabilities and int labels."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.shape != (len(labels), n_classes):
        raise ValueError(f"probs shape {probs.shape} != ({len(labels)}, {n_classes})")
    onehot = np.zeros_like(probs)
    onehot[np.arange(len(labels)), labels] = 1.0
    return _aggregate(probs, onehot)


def multilabel_metrics(scores: np.ndarray, labels: np.ndarray) -> dict:
    """Multilabel metrics from (N, K) per-bit scores and 0/1 labels."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.shape != labels.shape:
        raise ValueError(f"scores shape {scores.shape} != labels shape {labels.shape}")
    return _aggregate(scores, labels)
