"""Evaluation metrics shared by the segmentation and classification stages.

Conventions that differ between libraries are pinned here:

* Dice of two empty masks is 1.0 (they agree on absence); empty vs
  nonempty is 0.0.
* ROC-AUC follows the Mann-Whitney definition, ties credited 0.5.
* F1-macro defines a class's F1 as 0 when precision + recall is 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


@dataclass
class ConfusionCounts:
    """Per-class confusion counts for a binary problem."""

    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def _as_binary_array(x, name: str) -> np.ndarray:
    arr = np.asarray(x)
    if arr.size == 0:
        raise ValidationError(f"{name} is empty")
    vals = np.unique(arr)
    if not np.isin(vals, (0, 1)).all():
        raise ValidationError(f"{name} must be binary (found values {vals[:5]})")
    return arr.astype(np.int64)


def dice_score(pred_mask, gt_mask) -> float:
    """Dice overlap 2|P∩G| / (|P|+|G|) between two binary masks."""
    p = _as_binary_array(pred_mask, "pred_mask")
    g = _as_binary_array(gt_mask, "gt_mask")
    if p.shape != g.shape:
        raise ValidationError(f"mask shapes differ: {p.shape} vs {g.shape}")
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    inter = int((p & g).sum())
    return 2.0 * inter / denom


def confusion_counts(y_true, y_pred, positive: int = 1) -> ConfusionCounts:
    t = _as_binary_array(y_true, "y_true")
    p = _as_binary_array(y_pred, "y_pred")
    if t.shape != p.shape:
        raise ValidationError(f"length mismatch: {t.shape} vs {p.shape}")
    tp = int(((t == positive) & (p == positive)).sum())
    fp = int(((t != positive) & (p == positive)).sum())
    fn = int(((t == positive) & (p != positive)).sum())
    tn = int(((t != positive) & (p != positive)).sum())
    return ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)


def accuracy(y_true, y_pred) -> float:
    t = _as_binary_array(y_true, "y_true")
    p = _as_binary_array(y_pred, "y_pred")
    if t.shape != p.shape:
        raise ValidationError(f"length mismatch: {t.shape} vs {p.shape}")
    return float((t == p).mean())


def _f1_for_class(t: np.ndarray, p: np.ndarray, cls: int) -> float:
    tp = int(((t == cls) & (p == cls)).sum())
    fp = int(((t != cls) & (p == cls)).sum())
    fn = int(((t == cls) & (p != cls)).sum())
    denom = 2 * tp + fp + fn
    if denom == 0:
        return 0.0
    return 2 * tp / denom


def f1_macro(y_true, y_pred) -> float:
    """Unweighted mean of per-class F1 over the two classes."""
    t = _as_binary_array(y_true, "y_true")
    p = _as_binary_array(y_pred, "y_pred")
    if t.shape != p.shape:
        raise ValidationError(f"length mismatch: {t.shape} vs {p.shape}")
    return 0.5 * (_f1_for_class(t, p, 0) + _f1_for_class(t, p, 1))


def roc_auc(y_true, scores) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg), ties counted 0.5.

    Computed via average ranks, which reproduces exact O(n^2) pair
    counting including tie credit.
    """
    t = _as_binary_array(y_true, "y_true")
    s = np.asarray(scores, dtype=np.float64)
    if t.shape != s.shape:
        raise ValidationError(f"length mismatch: {t.shape} vs {s.shape}")
    if not np.isfinite(s).all():
        raise ValidationError("scores must be finite")
    n_pos = int(t.sum())
    n_neg = t.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("roc_auc undefined: both classes must be present")

    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    ranks = np.empty(t.size, dtype=np.float64)
    i = 0
    while i < t.size:
        j = i
        while j + 1 < t.size and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        # average rank for the tie group, 1-based
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum_pos = float(ranks[t == 1].sum())
    u = rank_sum_pos - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)
