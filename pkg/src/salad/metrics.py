"""Ranking metrics for anomaly scores: ROC-AUC, average precision, curve points.

AUC uses the exact Mann-Whitney formulation instead of integrating an
approximate curve; the ROC staircase exists for plotting and as a
cross-check (its trapezoidal area equals the rank statistic).
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata


@dataclass
class LabeledScores:
    """Per-sample anomaly scores with their ground-truth labels (1 = anomalous)."""

    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.scores.ndim != 1 or self.scores.shape != self.labels.shape:
            raise ValueError("scores and labels must be equal-length 1-d sequences")
        if not np.isfinite(self.scores).all():
            raise ValueError("scores must be finite")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must be 0 (normal) or 1 (anomalous)")

    def class_counts(self):
        pos = int(self.labels.sum())
        return pos, int(self.labels.size - pos)


def _require_both_classes(ls):
    pos, neg = ls.class_counts()
    if pos == 0 or neg == 0:
        raise ValueError("need at least one normal and one anomalous label")
    return pos, neg


def roc_auc(ls):
    """Probability a random anomalous score beats a random normal one, ties half."""
    pos, neg = _require_both_classes(ls)
    ranks = rankdata(ls.scores)  # average ranks make ties count 1/2
    pos_rank_sum = ranks[ls.labels == 1].sum()
    return float((pos_rank_sum - pos * (pos + 1) / 2) / (pos * neg))


def auprc(ls):
    """Average precision walked in descending score order.

    Equal scores keep their original submission order (stable sort), so tied
    inputs produce a deterministic, order-dependent value; callers comparing
    heavily tied score sets should be aware of that convention.
    """
    pos, _ = _require_both_classes(ls)
    order = np.argsort(-ls.scores, kind="stable")
    hits = ls.labels[order] == 1
    tp = np.cumsum(hits)
    ranks = np.arange(1, hits.size + 1)
    return float((tp[hits] / ranks[hits]).sum() / pos)


def _threshold_groups(ls):
    order = np.argsort(-ls.scores, kind="stable")
    scores = ls.scores[order]
    labels = ls.labels[order]
    i, n = 0, scores.size
    tp = fp = 0
    while i < n:
        j = i
        while j < n and scores[j] == scores[i]:
            j += 1
        tp += int((labels[i:j] == 1).sum())
        fp += int((labels[i:j] == 0).sum())
        yield tp, fp
        i = j


def roc_points(ls):
    """ROC staircase from (0,0) to (1,1), one point per distinct threshold."""
    pos, neg = _require_both_classes(ls)
    points = [(0.0, 0.0)]
    for tp, fp in _threshold_groups(ls):
        points.append((fp / neg, tp / pos))
    return points


def pr_points(ls):
    """Precision-recall staircase for plotting, anchored at recall 0."""
    pos, _ = _require_both_classes(ls)
    points = [(0.0, 1.0)]
    for tp, fp in _threshold_groups(ls):
        points.append((tp / pos, tp / (tp + fp)))
    return points


def trapezoid_area(points):
    xs = np.array([p[0] for p in points])
    ys = np.array([p[1] for p in points])
    return float(np.trapezoid(ys, xs))


def write_points_csv(path, points, columns):
    """Two-column curve CSV; floats use repr so they round-trip exactly."""
    lines = [",".join(columns)]
    for p in points:
        lines.append(",".join(repr(float(v)) for v in p))
    Path(path).write_text("\n".join(lines) + "\n")
