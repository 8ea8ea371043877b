"""Rendered report figures, written alongside the delimited outputs.

Every report-producing command emits its primary TSV/PGM artifacts and a
matching PNG render: confusion matrix, embedding scatter, training curves,
and an attribution montage. The delimited files remain the canonical,
byte-stable outputs; the figures are for humans.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from echodx.metrics import normalize_rows

_DPI = 120


def save_confusion_figure(counts, class_names, path) -> None:
    norm = normalize_rows(counts)
    k = len(class_names)
    fig, ax = plt.subplots(figsize=(4.2, 3.6))
    im = ax.imshow(norm, cmap="Blues", vmin=0.0, vmax=1.0)
    for i in range(k):
        for j in range(k):
            ax.text(j, i, f"{norm[i, j]:.2f}", ha="center", va="center",
                    color="white" if norm[i, j] > 0.5 else "black", fontsize=9)
    ax.set_xticks(range(k), class_names, rotation=30, ha="right")
    ax.set_yticks(range(k), class_names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def save_embedding_figure(points, labels, class_names, path) -> None:
    points = np.asarray(points)
    labels = np.asarray(labels)
    fig, ax = plt.subplots(figsize=(4.6, 4.0))
    for cls, name in enumerate(class_names):
        sel = labels == cls
        if sel.any():
            ax.scatter(points[sel, 0], points[sel, 1], s=14, alpha=0.8,
                       label=name)
    ax.set_xlabel("tSNE-1")
    ax.set_ylabel("tSNE-2")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def save_training_curves(log_rows, path) -> None:
    rows = np.asarray(log_rows, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(4.6, 3.2))
    ax.plot(rows[:, 0], rows[:, 1], label="train")
    ax.plot(rows[:, 0], rows[:, 2], label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def save_attribution_figure(clip, values, path, n_frames: int = 6) -> None:
    """Montage of input frames (top) and positive relevance (bottom)."""
    clip = np.asarray(clip)
    pos = np.maximum(np.asarray(values), 0.0)
    idx = np.linspace(0, clip.shape[0] - 1, n_frames).round().astype(int)
    fig, axes = plt.subplots(2, n_frames, figsize=(1.6 * n_frames, 3.4))
    vmax = pos.max() if pos.max() > 0 else 1.0
    for col, k in enumerate(idx):
        axes[0, col].imshow(clip[k], cmap="gray", vmin=0, vmax=max(clip.max(), 1e-6))
        axes[0, col].set_title(f"frame {k}", fontsize=8)
        axes[1, col].imshow(pos[k], cmap="inferno", vmin=0, vmax=vmax)
        for row in range(2):
            axes[row, col].set_xticks([])
            axes[row, col].set_yticks([])
    axes[0, 0].set_ylabel("input", fontsize=8)
    axes[1, 0].set_ylabel("relevance+", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
