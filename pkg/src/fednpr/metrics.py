"""Balanced accuracy, balanced one-vs-rest AUC, and client averaging."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.stats import rankdata

from .errors import MetricError


@dataclass
class EvalRecord:
    client: int
    round: int
    split: str
    bacc: float
    bauc: float
    per_class_acc: np.ndarray
    per_class_auc: np.ndarray
    loss_sup: float = 0.0
    loss_npr: float = 0.0
    auc_excluded: list[int] = field(default_factory=list)


def balanced_accuracy(predictions, labels, n_classes: int) -> tuple[float, np.ndarray]:
    """Mean recall over classes present in ``labels``.

    ``per_class_acc`` is NaN for classes absent from ``labels``.
    """
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise MetricError("balanced accuracy of an empty set is undefined")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise MetricError(f"labels outside [0, {n_classes})")
    per_class = np.full(n_classes, np.nan)
    recalls = []
    for c in range(n_classes):
        mask = labels == c
        if mask.any():
            # exact rational recall so the mean is correctly rounded
            recalls.append(Fraction(int(np.sum(predictions[mask] == c)), int(mask.sum())))
            per_class[c] = float(recalls[-1])
    return float(sum(recalls) / len(recalls)), per_class


def _binary_auc(score: np.ndarray, positive: np.ndarray) -> float:
    # Mann-Whitney U with average ranks: ties between a positive and a negative count 1/2.
    ranks = rankdata(score)
    n_pos = positive.sum()
    n_neg = len(score) - n_pos
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def balanced_auc(scores, labels, n_classes: int) -> tuple[float, np.ndarray, list[int]]:
    """Macro one-vs-rest AUC over classes that have both positives and negatives.

    Returns ``(bauc, per_class_auc, excluded)``; excluded classes are NaN in
    ``per_class_auc``. ``bauc`` is NaN when no class is evaluable.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise MetricError("AUC of an empty set is undefined")
    if scores.shape != (len(labels), n_classes):
        raise MetricError(f"scores shape {scores.shape}, expected {(len(labels), n_classes)}")
    per_class = np.full(n_classes, np.nan)
    excluded = []
    for c in range(n_classes):
        pos = labels == c
        if pos.all() or not pos.any():
            excluded.append(c)
            continue
        per_class[c] = _binary_auc(scores[:, c], pos)
    bauc = float(np.nanmean(per_class)) if np.isfinite(per_class).any() else float("nan")
    return bauc, per_class, excluded


def federated_average(records: list[EvalRecord]) -> tuple[float, float]:
    """Unweighted mean of bACC and bAUC over clients (NaN bAUCs skipped)."""
    if not records:
        raise MetricError("no records to average")
    bacc = float(np.mean([r.bacc for r in records]))
    baucs = [r.bauc for r in records if np.isfinite(r.bauc)]
    bauc = float(np.mean(baucs)) if baucs else float("nan")
    return bacc, bauc
