"""Evaluation metrics: ROC-AUC, average precision, MAE, accuracy, seed aggregation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import PreconditionError, UndefinedMetricError


@dataclass(frozen=True)
class MetricResult:
    name: str
    value: float
    n_samples: int


def _pair(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise PreconditionError(f"length mismatch: {scores.shape[0]} scores, {labels.shape[0]} labels")
    return scores, labels


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC; tied scores count one half."""
    scores, labels = _pair(scores, labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC-AUC needs both classes present")
    ranks = rankdata(scores, method="average")
    # numerator is a multiple of 1/2, exact in float64
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """Step-wise AP over the descending ranking; equal scores keep input order."""
    scores, labels = _pair(scores, labels)
    hits = labels == 1
    n_pos = int(hits.sum())
    if n_pos == 0:
        raise UndefinedMetricError("average precision needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    hit = hits[order]
    tp = np.cumsum(hit)
    precision = tp / np.arange(1, len(hit) + 1)
    return float(precision[hit].sum() / n_pos)


def mae(predictions, targets) -> float:
    p = np.asarray(predictions, dtype=np.float64).ravel()
    t = np.asarray(targets, dtype=np.float64).ravel()
    if p.shape != t.shape or p.size == 0:
        raise PreconditionError("mae needs equal, non-zero lengths")
    return float(np.mean(np.abs(p - t)))


def accuracy(predicted, labels) -> float:
    p = np.asarray(predicted).ravel()
    t = np.asarray(labels).ravel()
    if p.shape != t.shape or p.size == 0:
        raise PreconditionError("accuracy needs equal, non-zero lengths")
    return float(np.mean(p == t))


def aggregate_seeds(values) -> tuple:
    """Mean and sample standard deviation (0 for a single value)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise PreconditionError("aggregate_seeds needs at least one value")
    if v.size == 1:
        return float(v[0]), 0.0
    return float(v.mean()), float(v.std(ddof=1))
