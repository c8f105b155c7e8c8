"""Accuracy, average precision, and attention-mask overlap."""

from __future__ import annotations

import math

import numpy as np


def accuracy(scores: np.ndarray, labels: np.ndarray) -> float:
    scores = np.asarray(scores)
    return float(np.mean(np.argmax(scores, axis=1) == np.asarray(labels)))


def average_precision(scores, labels) -> float:
    """Non-interpolated AP: mean of precision at the rank of each positive.

    Ties keep input order (stable sort on descending score).
    """
    scores = np.asarray(scores, dtype=float).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(bool)
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} differ")
    npos = int(labels.sum())
    if npos == 0:
        raise ValueError("average_precision needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    ranks = np.arange(1, hits.size + 1)
    precision = np.cumsum(hits) / ranks
    # fsum is correctly rounded, so the result does not depend on summation order
    return math.fsum(precision[hits].tolist()) / npos


def mean_ap(scores: np.ndarray, labels: np.ndarray) -> tuple[float, list[float]]:
    """Unweighted mean over classes of one-vs-rest AP.

    ``scores`` is ``n×K``; ``labels`` holds class indices. Classes with no
    positives are left out of the mean and reported as NaN.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    per_class = []
    for k in range(scores.shape[1]):
        positives = labels == k
        per_class.append(average_precision(scores[:, k], positives) if positives.any() else float("nan"))
    if np.all(np.isnan(per_class)):
        raise ValueError("mean_ap needs at least one class with positives")
    return float(np.nanmean(per_class)), per_class


def attention_iou(s_act: np.ndarray, truth_mask: np.ndarray, threshold: float = 0.5) -> float:
    s_act = np.asarray(s_act)
    truth = np.asarray(truth_mask).astype(bool)
    if s_act.shape != truth.shape:
        raise ValueError(f"attention map {s_act.shape} and mask {truth.shape} differ")
    pred = s_act > threshold
    union = np.logical_or(pred, truth).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, truth).sum() / union)
