import numpy as np
import pytest

from salad.metrics import (
    LabeledScores,
    auprc,
    pr_points,
    roc_auc,
    roc_points,
    trapezoid_area,
    write_points_csv,
)


def pairwise_auc(scores, labels):
    # literal definition: count (positive, negative) pairs, ties half
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1.0
            elif p == q:
                wins += 0.5
    return wins / (pos.size * neg.size)


def random_instance(seed, n=40, tied=False):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=n)
    if labels.sum() == 0:
        labels[0] = 1
    if labels.sum() == n:
        labels[0] = 0
    if tied:
        scores = rng.integers(0, 5, size=n).astype(np.float64)
    else:
        scores = rng.random(n)
    return LabeledScores(scores, labels)


def test_labeled_scores_validation():
    with pytest.raises(ValueError):
        LabeledScores([0.1, 0.2], [0])
    with pytest.raises(ValueError):
        LabeledScores([0.1, np.inf], [0, 1])
    with pytest.raises(ValueError):
        LabeledScores([0.1, 0.2], [0, 2])


def test_single_class_rejected_everywhere():
    ls = LabeledScores([0.1, 0.2], [1, 1])
    for fn in (roc_auc, auprc, roc_points, pr_points):
        with pytest.raises(ValueError):
            fn(ls)


def test_auc_perfect_separation():
    ls = LabeledScores([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0])
    assert roc_auc(ls) == 1.0


def test_auc_worked_example():
    ls = LabeledScores([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
    assert abs(roc_auc(ls) - 0.75) < 1e-12


def test_auc_all_ties_is_half():
    ls = LabeledScores([0.5] * 6, [0, 1, 0, 1, 0, 1])
    assert roc_auc(ls) == 0.5


def test_auc_matches_pairwise_oracle():
    for seed in range(100):
        ls = random_instance(seed, tied=(seed % 2 == 0))
        assert abs(roc_auc(ls) - pairwise_auc(ls.scores, ls.labels)) < 1e-12


def test_auc_invariant_under_monotone_transform():
    for seed in range(20):
        ls = random_instance(seed)
        base = roc_auc(ls)
        for f in (np.exp, np.log1p, lambda s: 3 * s - 7):
            assert abs(roc_auc(LabeledScores(f(ls.scores), ls.labels)) - base) < 1e-12


def test_auc_complement_identity_without_ties():
    for seed in range(20):
        ls = random_instance(seed, tied=False)
        flipped = LabeledScores(-ls.scores, ls.labels)
        assert abs(roc_auc(ls) + roc_auc(flipped) - 1.0) < 1e-12


def test_auc_permutation_invariant():
    rng = np.random.default_rng(0)
    ls = random_instance(7)
    base = roc_auc(ls)
    for _ in range(10):
        perm = rng.permutation(ls.scores.size)
        assert abs(roc_auc(LabeledScores(ls.scores[perm], ls.labels[perm])) - base) < 1e-12


def test_auprc_perfect_separation():
    ls = LabeledScores([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0])
    assert auprc(ls) == 1.0


def test_auprc_positive_ranked_last():
    ls = LabeledScores([0.2, 0.9], [1, 0])
    assert abs(auprc(ls) - 0.5) < 1e-12


def test_auprc_tie_break_follows_input_order():
    # equal scores are ranked by submission position, so these two orderings
    # legitimately differ; this pins the documented convention
    first = auprc(LabeledScores([0.5, 0.5], [1, 0]))
    second = auprc(LabeledScores([0.5, 0.5], [0, 1]))
    assert first == 1.0
    assert second == 0.5


def test_auprc_permutation_invariant_without_ties():
    rng = np.random.default_rng(1)
    ls = random_instance(11, tied=False)
    base = auprc(ls)
    for _ in range(10):
        perm = rng.permutation(ls.scores.size)
        assert abs(auprc(LabeledScores(ls.scores[perm], ls.labels[perm])) - base) < 1e-12


def test_auprc_random_scores_track_prevalence():
    rng = np.random.default_rng(2)
    prevalence = 0.3
    values = []
    for _ in range(200):
        labels = np.zeros(100, dtype=np.int64)
        labels[:30] = 1
        rng.shuffle(labels)
        values.append(auprc(LabeledScores(rng.random(100), labels)))
    mean = float(np.mean(values))
    assert mean >= prevalence - 1e-3
    assert abs(mean - prevalence) < 0.05


def test_roc_points_endpoints_and_monotone():
    for seed in range(30):
        ls = random_instance(seed, tied=(seed % 3 == 0))
        pts = roc_points(ls)
        assert pts[0] == (0.0, 0.0)
        assert pts[-1] == (1.0, 1.0)
        fpr = [p[0] for p in pts]
        tpr = [p[1] for p in pts]
        assert all(b >= a for a, b in zip(fpr, fpr[1:]))
        assert all(b >= a for a, b in zip(tpr, tpr[1:]))


def test_roc_points_one_per_distinct_threshold():
    ls = LabeledScores([0.5, 0.5, 0.2, 0.9], [1, 0, 0, 1])
    pts = roc_points(ls)
    assert len(pts) == 1 + 3


def test_staircase_area_equals_rank_auc():
    for seed in range(100):
        ls = random_instance(seed, tied=(seed % 2 == 0))
        assert abs(trapezoid_area(roc_points(ls)) - roc_auc(ls)) < 1e-10


def test_pr_points_shape():
    ls = LabeledScores([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0])
    pts = pr_points(ls)
    assert pts[0] == (0.0, 1.0)
    assert pts[-1][0] == 1.0


def test_points_csv_round_trips(tmp_path):
    ls = random_instance(3)
    pts = roc_points(ls)
    path = tmp_path / "roc.csv"
    write_points_csv(path, pts, ("fpr", "tpr"))
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "fpr,tpr"
    parsed = [tuple(float(v) for v in line.split(",")) for line in lines[1:]]
    assert parsed == [(float(a), float(b)) for a, b in pts]
