"""Report writers: key=value text, CSV, and matplotlib figures.

Every report path writes the delimited data first and then renders a
figure next to it: loss curves beside the loss-history CSV, the CMC curve
beside the metrics report, and a score heatmap beside the attention CSV.
"""

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

__all__ = [
    "write_metrics",
    "write_loss_history",
    "write_attention",
]


def write_metrics(report, out_dir, stem="metrics"):
    """metrics.txt (key=value), metrics.csv, and the CMC curve figure.

    Returns the paths written.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    txt_path = out_dir / f"{stem}.txt"
    with open(txt_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(report.lines()) + "\n")

    csv_path = out_dir / f"{stem}.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        for rank, acc in sorted(report.rank_accuracy.items()):
            writer.writerow([f"rank{rank}", f"{acc:.6f}"])
        writer.writerow(["map", f"{report.map_score:.6f}"])
        writer.writerow(["evaluated", report.num_evaluated])
        writer.writerow(["skipped", report.num_skipped])

    paths = [txt_path, csv_path]
    if report.cmc_curve:
        fig_path = out_dir / f"{stem}_cmc.png"
        ranks = [r for r, _ in report.cmc_curve]
        accs = [a for _, a in report.cmc_curve]
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot(ranks, accs, marker="o", markersize=3)
        ax.set_xlabel("rank")
        ax.set_ylabel("matching accuracy")
        ax.set_ylim(0.0, 1.02)
        ax.grid(alpha=0.3)
        fig.tight_layout()
        fig.savefig(fig_path, dpi=120)
        plt.close(fig)
        paths.append(fig_path)
    return paths


def write_loss_history(history, out_dir, stem="loss_history"):
    """loss_history.csv plus the per-epoch loss-curve figure."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{stem}.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "total", "softmax", "triplet", "reg"])
        for row in history:
            writer.writerow([row.epoch, repr(row.total), repr(row.softmax),
                             repr(row.triplet), repr(row.reg)])

    fig_path = out_dir / f"{stem}.png"
    fig, ax = plt.subplots(figsize=(5, 3.5))
    epochs = [row.epoch for row in history]
    for field, label in (("total", "total"), ("softmax", "softmax"),
                         ("triplet", "triplet"), ("reg", "reg")):
        ax.plot(epochs, [getattr(row, field) for row in history], label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(fig_path, dpi=120)
    plt.close(fig)
    return [csv_path, fig_path]


def write_attention(scores, csv_path, figure=True):
    """Attention score CSV (frame_index,region_index,score) plus a heatmap."""
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame_index", "region_index", "score"])
        for n in range(scores.shape[0]):
            for k in range(scores.shape[1]):
                writer.writerow([n, k, f"{scores[n, k]:.8f}"])
    paths = [csv_path]
    if figure:
        fig_path = csv_path.with_suffix(".png")
        fig, ax = plt.subplots(figsize=(4, 3.5))
        im = ax.imshow(scores, cmap="viridis", aspect="auto")
        ax.set_xlabel("region")
        ax.set_ylabel("frame")
        fig.colorbar(im, ax=ax, label="score")
        fig.tight_layout()
        fig.savefig(fig_path, dpi=120)
        plt.close(fig)
        paths.append(fig_path)
    return paths
