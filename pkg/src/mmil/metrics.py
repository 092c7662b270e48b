"""Bag-level evaluation metrics."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import MetricError

THRESHOLD = 0.5


def _labels(labels) -> np.ndarray:
    y = np.asarray(labels)
    if y.size and not np.isin(y, (0, 1)).all():
        raise MetricError("labels must be 0 or 1")
    return y.astype(np.int64)


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney estimate: P(s+ > s-) + 0.5 P(s+ == s-).

    Computed from mid-ranks after one sort, so tied scores get half credit.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = _labels(labels)
    if s.shape != y.shape:
        raise MetricError(f"{s.size} scores for {y.size} labels")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC is undefined unless both classes are present")
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    # mid-rank (1-based) of each run of equal scores
    starts = np.flatnonzero(np.r_[True, sorted_s[1:] != sorted_s[:-1]])
    ends = np.r_[starts[1:], s.size]
    mid = (starts + ends + 1) / 2.0
    ranks = np.empty(s.size)
    ranks[order] = np.repeat(mid, ends - starts)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def accuracy(scores: Sequence[float], labels: Sequence[int], threshold: float = THRESHOLD) -> float:
    """Fraction correct when ``score >= threshold`` predicts the positive class."""
    s = np.asarray(scores, dtype=np.float64)
    y = _labels(labels)
    if s.shape != y.shape or s.size == 0:
        raise MetricError(f"{s.size} scores for {y.size} labels")
    return float(np.mean((s >= threshold).astype(np.int64) == y))
