"""Inference-time anomaly scoring: weighted-kNN angular vote against the bank.

A query embedding is compared to every remembered slot by angular distance.
The K nearest slots vote with their share of the total angle mass, so a
query sitting on top of a dense normal cluster collects near-zero weights
while an outlier far from everything collects large ones.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .membank import discard_anomalous
from .model import encode


@dataclass
class AnomalyScore:
    """One query's score: raw vote mean, batch-normalized value, and the votes.

    votes holds (original bank slot index, weight) for the K nearest slots.
    normalized is filled by score_dataset; a lone anomaly_score call leaves
    it None because min-max rescaling needs the whole scored set.
    """

    raw: float
    votes: list
    normalized: float = None


def anomaly_score(z, view, k):
    """Score one unit-norm embedding against a bank view.

    Angular distances use arccos of the cosine clamped to [-1, 1]; the
    weight denominator sums over every slot in the view while numerators
    are taken only at the k smallest angles. The raw score is the mean
    of those k normalized shares.
    """
    z = np.asarray(z, dtype=np.float64)
    if view.size == 0:
        raise ValueError("cannot score against an empty bank view")
    if k < 1 or k > view.size:
        raise ValueError(f"k={k} out of range for view of {view.size} slots")
    if abs(np.linalg.norm(z) - 1.0) > 1e-6:
        raise ValueError("query embedding must be unit-norm")

    angles = np.arccos(np.clip(view.slots @ z, -1.0, 1.0))
    denom = angles.sum()
    order = np.argsort(angles, kind="stable")[:k]
    if denom == 0.0:
        # every slot coincides with the query; all angles vanish
        weights = np.zeros(k)
    else:
        weights = angles[order] / denom
    votes = [(int(view.index_map[i]), float(w)) for i, w in zip(order, weights)]
    return AnomalyScore(raw=float(weights.mean()), votes=votes)


def score_dataset(samples, params, bank, k):
    """Encode and score every sample against the anomaly-filtered bank.

    The normalized field is min-max rescaled over this scored set; a
    degenerate spread (singleton or all-equal raws) normalizes to 0.
    """
    if len(samples) == 0:
        raise ValueError("no samples to score")
    view = discard_anomalous(bank)
    scores = []
    for x in samples:
        z = encode(params, Tensor(np.asarray(x, dtype=np.float64))).data
        scores.append(anomaly_score(z, view, k))
    raws = np.array([s.raw for s in scores])
    spread = raws.max() - raws.min()
    for s in scores:
        s.normalized = float((s.raw - raws.min()) / spread) if spread > 0 else 0.0
    return scores


def read_scores_csv(path):
    """Read a score table back: (ids, raw, normalized, labels or None)."""
    lines = Path(path).read_text().strip().split("\n")
    header = lines[0].split(",")
    if header[:3] != ["id", "raw", "normalized"]:
        raise ValueError(f"{path} is not a score table")
    has_labels = len(header) == 4 and header[3] == "label"
    ids, raw, normalized, labels = [], [], [], []
    for line in lines[1:]:
        cells = line.split(",")
        ids.append(cells[0])
        raw.append(float(cells[1]))
        normalized.append(float(cells[2]))
        if has_labels:
            labels.append(int(cells[3]))
    return ids, np.array(raw), np.array(normalized), (np.array(labels) if has_labels else None)


def write_scores_csv(path, ids, scores, labels=None):
    """Score table CSV: sample id, raw, normalized, and label when known."""
    if labels is not None and len(labels) != len(scores):
        raise ValueError("labels must align with scores")
    header = "id,raw,normalized" + (",label" if labels is not None else "")
    lines = [header]
    for i, s in enumerate(scores):
        row = f"{ids[i]},{s.raw!r},{s.normalized!r}"
        if labels is not None:
            row += f",{int(labels[i])}"
        lines.append(row)
    Path(path).write_text("\n".join(lines) + "\n")
