"""Report figures written next to the CSV/JSON outputs."""

from __future__ import annotations

import io
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .ensemble import CLASSES, MetricReport, SweepRow  # noqa: E402
from .fileio import atomic_write_bytes  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.bbox": "tight",
}


def _save(fig, path) -> None:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", metadata={"Software": None})
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())


def plot_training_curves(reports: Sequence, path) -> None:
    epochs = [r.epoch for r in reports]
    with plt.rc_context(STYLE):
        fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(7.0, 2.8))
        ax_loss.plot(epochs, [r.train_loss for r in reports], color="tab:blue")
        ax_loss.set_xlabel("epoch")
        ax_loss.set_ylabel("train loss")
        ax_acc.plot(epochs, [r.val_accuracy for r in reports], label="accuracy")
        ax_acc.plot(epochs, [r.val_sensitivity for r in reports], label="sensitivity", ls="--")
        ax_acc.plot(epochs, [r.val_specificity for r in reports], label="specificity", ls=":")
        ax_acc.set_ylim(0.0, 1.02)
        ax_acc.set_xlabel("epoch")
        ax_acc.set_ylabel("validation")
        ax_acc.legend(frameon=False)
        _save(fig, path)


def plot_confusion(report: MetricReport, path, title: str = "") -> None:
    cm = np.asarray(report.confusion)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.4, 3.0))
        ax.imshow(cm, cmap="Blues")
        for (i, j), count in np.ndenumerate(cm):
            colour = "white" if count > cm.max() / 2 else "black"
            ax.text(j, i, str(count), ha="center", va="center", color=colour)
        ax.set_xticks(range(len(CLASSES)), CLASSES, rotation=30)
        ax.set_yticks(range(len(CLASSES)), CLASSES)
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        ax.set_title(title or f"accuracy {report.accuracy:.4f}")
        _save(fig, path)


def plot_sweep(rows: Sequence[SweepRow], path) -> None:
    labels = [r.models if r.weights == "/" else f"{r.models}\n{r.weights}" for r in rows]
    acc = [r.report.accuracy for r in rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(3.0, 1.1 * len(rows)), 2.8))
        bars = ax.bar(range(len(rows)), acc, color="tab:gray")
        for bar, a in zip(bars, acc):
            ax.text(bar.get_x() + bar.get_width() / 2, a, f"{a:.4f}", ha="center", va="bottom", fontsize=7)
        ax.set_xticks(range(len(rows)), labels)
        ax.set_ylabel("accuracy")
        ax.set_ylim(min(acc) - 0.05 if min(acc) > 0.05 else 0.0, 1.0)
        _save(fig, path)


def plot_preview_grid(images: Sequence[np.ndarray], path, titles: Sequence[str] = ()) -> None:
    n = len(images)
    cols = min(n, 4)
    rows = (n + cols - 1) // cols
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(rows, cols, figsize=(2.0 * cols, 2.0 * rows), squeeze=False)
        for k, ax in enumerate(axes.flat):
            ax.axis("off")
            if k < n:
                img = np.clip(images[k], 0.0, 1.0)
                ax.imshow(img[:, :, 0] if img.shape[2] == 1 else img, cmap="gray", vmin=0, vmax=1)
                if k < len(titles):
                    ax.set_title(titles[k], fontsize=7)
        _save(fig, path)
