"""Evaluation metrics: CER, average class accuracy, confusion matrix, ROC/AUC."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datamodel import BLANK_CHAR, DataError, EditCounts, letter_to_index


def cer(pred: str, gt: str) -> tuple[float, EditCounts]:
    """Character error rate (S + D + I) / N with the operation counts.

    Levenshtein alignment with unit costs; among cost-minimal alignments the
    backtrace prefers substitutions over insert+delete pairs.  Deletions are
    reference characters the prediction missed, insertions are prediction
    characters with no reference counterpart.  May exceed 1.0 for long
    hallucinated predictions.
    """
    if len(gt) == 0:
        raise DataError("ground truth must be non-empty")
    np_, ng = len(pred), len(gt)
    d = np.zeros((np_ + 1, ng + 1), dtype=np.int64)
    d[:, 0] = np.arange(np_ + 1)
    d[0, :] = np.arange(ng + 1)
    for i in range(1, np_ + 1):
        for j in range(1, ng + 1):
            cost = 0 if pred[i - 1] == gt[j - 1] else 1
            d[i, j] = min(d[i - 1, j - 1] + cost, d[i - 1, j] + 1, d[i, j - 1] + 1)
    s = dl = ins = 0
    i, j = np_, ng
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (pred[i - 1] != gt[j - 1]):
            s += int(pred[i - 1] != gt[j - 1])
            i, j = i - 1, j - 1
        elif j > 0 and d[i, j] == d[i, j - 1] + 1:
            dl += 1
            j -= 1
        else:
            ins += 1
            i -= 1
    counts = EditCounts(substitutions=s, deletions=dl, insertions=ins, reference_length=ng)
    return counts.cer, counts


def _to_letter_index(sym) -> int:
    if isinstance(sym, str):
        return 0 if sym == BLANK_CHAR else letter_to_index(sym)
    return int(sym)


def avg_class_accuracy(preds, gts) -> float:
    """Mean per-class recall over the classes present in the ground truth."""
    preds = list(preds)
    gts = list(gts)
    if len(preds) != len(gts):
        raise DataError("preds and gts must have equal length")
    if not gts:
        raise DataError("empty input")
    correct: dict = {}
    total: dict = {}
    for p, g in zip(preds, gts):
        total[g] = total.get(g, 0) + 1
        if p == g:
            correct[g] = correct.get(g, 0) + 1
    return float(np.mean([correct.get(g, 0) / n for g, n in total.items()]))


@dataclass
class ConfusionMatrix:
    """26x26 letter confusion counts; rows are ground truth, columns predictions."""

    counts: np.ndarray

    def row_percent(self) -> np.ndarray:
        """Row-normalized percentages; all-zero rows stay zero."""
        sums = self.counts.sum(axis=1, keepdims=True).astype(np.float64)
        with np.errstate(invalid="ignore", divide="ignore"):
            pct = np.where(sums > 0, 100.0 * self.counts / sums, 0.0)
        return pct


def confusion(preds, gts) -> ConfusionMatrix:
    """Accumulate (gt, pred) pairs over frames where both carry a letter.

    Frames whose ground truth or prediction is blank do not enter the matrix.
    """
    counts = np.zeros((26, 26), dtype=np.int64)
    for p, g in zip(preds, gts):
        pi, gi = _to_letter_index(p), _to_letter_index(g)
        if pi > 0 and gi > 0:
            counts[gi - 1, pi - 1] += 1
    return ConfusionMatrix(counts=counts)


def roc_auc(scores, labels) -> tuple[np.ndarray, float]:
    """ROC curve and AUC for binary labels.

    AUC is the Mann-Whitney rank statistic with midranks for ties (so ties
    count one half).  The curve sweeps a threshold over every distinct score;
    points are (FPR, TPR) from (0,0) to (1,1).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise DataError("scores and labels must be equal-length 1-D arrays")
    n_pos = int(labels.sum())
    n_neg = int(len(labels) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise DataError("both classes must be present")

    # midranks (1-based), vectorized over tie groups
    _, inv, counts = np.unique(scores, return_inverse=True, return_counts=True)
    group_start = np.cumsum(counts) - counts
    midrank = group_start + (counts + 1) / 2.0
    ranks = midrank[inv]
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    auc = float(u / (n_pos * n_neg))

    order = np.argsort(-scores, kind="mergesort")
    y = labels[order]
    s = scores[order]
    tps = np.cumsum(y)
    fps = np.cumsum(1 - y)
    last_of_group = np.nonzero(np.r_[np.diff(s) != 0, True])[0]
    curve = np.vstack([
        np.zeros((1, 2)),
        np.column_stack([fps[last_of_group] / n_neg, tps[last_of_group] / n_pos]),
    ])
    return curve, auc
