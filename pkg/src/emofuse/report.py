"""Report emission: delimited files, text tables, and matplotlib figures.

Every writer here is deterministic: floats use a fixed format, PNGs are
saved without volatile metadata, and nothing embeds timestamps, so repeated
runs with the same seed produce identical bytes.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .train import HistoryRow, Metrics

_PNG_META = {"Software": None}  # strip the matplotlib version string


def _fmt(x: float) -> str:
    return repr(float(x))  # shortest round-trip form, stable across runs


def write_history_csv(path, history: list[HistoryRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_macro_f1", "lr"])
        for row in history:
            writer.writerow([row.epoch, _fmt(row.train_loss), _fmt(row.val_macro_f1), _fmt(row.lr)])


def write_confusion_csv(path, confusion: np.ndarray, class_names: list[str]) -> None:
    """K x K counts with true classes as rows, predicted classes as columns."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["true\\pred"] + list(class_names))
        for i, name in enumerate(class_names):
            writer.writerow([name] + [int(v) for v in confusion[i]])


def metrics_table(metrics: Metrics, class_names: list[str]) -> str:
    """Human-readable per-class precision/recall/F1 plus the summary scores."""
    width = max(len(n) for n in class_names)
    lines = [f"{'class':<{width}}  precision  recall  f1"]
    for i, name in enumerate(class_names):
        lines.append(
            f"{name:<{width}}  {metrics.precision[i]:>9.4f}  {metrics.recall[i]:>6.4f}  {metrics.f1[i]:.4f}"
        )
    lines.append("")
    lines.append(f"macro F1: {metrics.macro_f1:.6f}")
    lines.append(f"accuracy: {metrics.accuracy:.6f}")
    return "\n".join(lines) + "\n"


def ensemble_table(member_rows: list[tuple[str, float]], ensemble_f1: float) -> str:
    """Member solo scores next to the ensemble score, leaderboard style."""
    width = max(len(name) for name, _ in member_rows + [("ensemble (hard voting)", 0.0)])
    lines = [f"{'model':<{width}}  macro F1"]
    for name, f1 in member_rows:
        lines.append(f"{name:<{width}}  {f1:.6f}")
    lines.append(f"{'ensemble (hard voting)':<{width}}  {ensemble_f1:.6f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Figures
# ---------------------------------------------------------------------------


def save_history_figure(path, history: list[HistoryRow]) -> None:
    """Training loss and validation macro F1 per epoch, twin axes."""
    epochs = [r.epoch for r in history]
    fig, ax_loss = plt.subplots(figsize=(7, 4))
    ax_loss.plot(epochs, [r.train_loss for r in history], color="tab:red", label="train loss")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("train loss", color="tab:red")
    ax_f1 = ax_loss.twinx()
    ax_f1.plot(epochs, [r.val_macro_f1 for r in history], color="tab:blue", label="val macro F1")
    ax_f1.set_ylabel("val macro F1", color="tab:blue")
    ax_f1.set_ylim(0.0, 1.05)
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)


def save_confusion_figure(path, confusion: np.ndarray, class_names: list[str]) -> None:
    """Heatmap of the confusion matrix with per-cell counts."""
    cm = np.asarray(confusion)
    fig, ax = plt.subplots(figsize=(5.5, 5))
    im = ax.imshow(cm, cmap="Blues")
    ax.set_xticks(range(len(class_names)), class_names, rotation=45, ha="right")
    ax.set_yticks(range(len(class_names)), class_names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    threshold = cm.max() / 2 if cm.max() > 0 else 0
    for i in range(cm.shape[0]):
        for j in range(cm.shape[1]):
            ax.text(
                j, i, str(int(cm[i, j])),
                ha="center", va="center",
                color="white" if cm[i, j] > threshold else "black",
                fontsize=8,
            )
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)


def save_dataset_figure(path, class_names: list[str], counts: list[int], frame_counts: list[int]) -> None:
    """Class distribution bar chart next to a frame-count histogram."""
    fig, (ax_cls, ax_len) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax_cls.bar(range(len(class_names)), counts, color="tab:blue")
    ax_cls.set_xticks(range(len(class_names)), class_names, rotation=45, ha="right")
    ax_cls.set_ylabel("samples")
    ax_cls.set_title("class distribution")
    ax_len.hist(frame_counts, bins=20, color="tab:orange")
    ax_len.set_xlabel("fused frames per sample")
    ax_len.set_ylabel("samples")
    ax_len.set_title("sequence lengths")
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)


def class_histogram_text(class_names: list[str], counts: list[int], bar_width: int = 40) -> str:
    """ASCII per-class count histogram for the CLI summary."""
    peak = max(counts) if counts else 1
    width = max(len(n) for n in class_names)
    lines = []
    for name, count in zip(class_names, counts):
        bar = "#" * max(1, round(bar_width * count / peak)) if count else ""
        lines.append(f"{name:<{width}}  {count:>6}  {bar}")
    return "\n".join(lines) + "\n"


def frame_histogram_text(frame_counts: list[int], bins: int = 10, bar_width: int = 40) -> str:
    """ASCII histogram of fused sequence lengths (the duration analog)."""
    counts, edges = np.histogram(frame_counts, bins=bins)
    peak = counts.max() if counts.size else 1
    lines = ["fused frames  samples"]
    for i, count in enumerate(counts):
        bar = "#" * max(1, round(bar_width * count / peak)) if count else ""
        lines.append(f"{edges[i]:>5.1f}-{edges[i + 1]:>5.1f}  {count:>6}  {bar}")
    return "\n".join(lines) + "\n"


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
