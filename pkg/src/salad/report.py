"""Figure rendering for training runs: loss curves, ROC/PR, score histograms.

Everything draws through the Agg backend so report generation works on
headless machines, and every figure lands next to a CSV holding the same
numbers so downstream tooling never has to scrape pixels.
"""

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .metrics import LabeledScores, auprc, pr_points, roc_auc, roc_points, write_points_csv
from .scorer import read_scores_csv


def read_loss_csv(path):
    """Load a loss CSV into a dict of numpy columns keyed by header name."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path} holds no loss rows")
    cols = {}
    for name in rows[0]:
        kind = int if name in ("epoch", "k") else float
        cols[name] = np.array([kind(r[name]) for r in rows])
    return cols


def render_loss_curves(loss_csv, out_png):
    cols = read_loss_csv(loss_csv)
    fig, (ax, ax_k) = plt.subplots(
        2, 1, figsize=(7, 5.5), sharex=True, height_ratios=[3, 1], constrained_layout=True
    )
    for name in ("mse", "ss", "agg", "total"):
        ax.plot(cols["epoch"], cols[name], label=name, linewidth=1.2)
    ax.set_yscale("log")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right", frameon=False)
    ax.set_title("training losses")

    ax_k.step(cols["epoch"], cols["k"], where="post", color="tab:gray")
    ax_k.set_ylabel("k")
    ax_k.set_xlabel("epoch")
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def render_score_histogram(raw_by_file, labels_by_file, out_png):
    """Pooled raw-score histogram, split by label when labels exist."""
    raws = np.concatenate(list(raw_by_file.values()))
    labels = None
    if all(v is not None for v in labels_by_file.values()):
        labels = np.concatenate([labels_by_file[k] for k in raw_by_file])
    fig, ax = plt.subplots(figsize=(6, 4), constrained_layout=True)
    bins = np.linspace(raws.min(), raws.max() or 1.0, 40)
    if labels is None:
        ax.hist(raws, bins=bins, color="tab:blue", alpha=0.8)
    else:
        ax.hist(raws[labels == 0], bins=bins, alpha=0.6, label="normal", color="tab:blue")
        ax.hist(raws[labels == 1], bins=bins, alpha=0.6, label="anomalous", color="tab:red")
        ax.legend(frameon=False)
    ax.set_xlabel("raw anomaly score")
    ax.set_ylabel("count")
    ax.set_title("score distribution")
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def _render_curves(kind, points_by_file, out_png):
    fig, ax = plt.subplots(figsize=(5, 5), constrained_layout=True)
    for name, pts in points_by_file.items():
        xs = [p[0] for p in pts]
        ys = [p[1] for p in pts]
        ax.plot(xs, ys, linewidth=1.2, label=name)
    if kind == "roc":
        ax.plot([0, 1], [0, 1], linestyle=":", color="gray", linewidth=0.8)
        ax.set_xlabel("false positive rate")
        ax.set_ylabel("true positive rate")
        ax.set_title("ROC")
    else:
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        ax.set_title("precision-recall")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    if len(points_by_file) > 1:
        ax.legend(frameon=False, fontsize=8)
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_png


def render_report(run_dir, out_dir):
    """Render every figure the run's artifacts support; returns written paths.

    Looks for losses.csv and scores*.csv under run_dir. ROC/PR figures and
    CSVs only appear when the score tables carry labels.
    """
    run = Path(run_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    loss_csv = run / "losses.csv"
    if loss_csv.exists():
        written.append(render_loss_curves(loss_csv, out / "loss_curves.png"))

    score_files = sorted(run.glob("scores*.csv"))
    if score_files:
        raw_by_file, labels_by_file = {}, {}
        for f in score_files:
            _, raw, _, labels = read_scores_csv(f)
            raw_by_file[f.stem] = raw
            labels_by_file[f.stem] = labels
        written.append(render_score_histogram(raw_by_file, labels_by_file, out / "score_hist.png"))

        labeled = {
            name: LabeledScores(raw_by_file[name], labels_by_file[name])
            for name in raw_by_file
            if labels_by_file[name] is not None and len(set(labels_by_file[name])) == 2
        }
        if labeled:
            roc_by_file = {name: roc_points(ls) for name, ls in labeled.items()}
            pr_by_file = {name: pr_points(ls) for name, ls in labeled.items()}
            written.append(_render_curves("roc", roc_by_file, out / "roc.png"))
            written.append(_render_curves("pr", pr_by_file, out / "pr.png"))
            first = next(iter(labeled))
            write_points_csv(out / "roc.csv", roc_by_file[first], ("fpr", "tpr"))
            write_points_csv(out / "pr.csv", pr_by_file[first], ("recall", "precision"))
            written.extend([out / "roc.csv", out / "pr.csv"])

            with open(out / "metrics.csv", "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["source", "auc", "auprc"])
                for name, ls in labeled.items():
                    writer.writerow([name, repr(roc_auc(ls)), repr(auprc(ls))])
            written.append(out / "metrics.csv")

    if not written:
        raise ValueError(f"{run_dir} holds no losses.csv or scores*.csv to report on")
    return [Path(p) for p in written]
