"""Figures written next to CLI outputs (matplotlib, non-interactive Agg backend)."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = [
    "plot_history",
    "plot_reconstructions",
    "plot_mask",
    "plot_rf_report",
    "plot_branches",
    "plot_ablation",
]

# no timestamps or version strings in the file, so reruns write identical bytes
_PNG_METADATA = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=100, metadata=_PNG_METADATA)
    plt.close(fig)
    return path


def plot_history(history: Sequence[dict], path, best_epoch: int | None = None) -> Path:
    """Train/validation loss (left) and validation PSNR (right) per epoch."""
    epochs = [r["epoch"] for r in history]
    fig, (ax_loss, ax_psnr) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax_loss.plot(epochs, [r["train_loss"] for r in history], label="train")
    ax_loss.plot(epochs, [r["val_loss"] for r in history], label="validation")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.set_yscale("log")
    ax_loss.legend()
    ax_psnr.plot(epochs, [r["val_psnr"] for r in history], color="tab:green")
    ax_psnr.set_xlabel("epoch")
    ax_psnr.set_ylabel("validation PSNR (dB)")
    if best_epoch is not None:
        for ax in (ax_loss, ax_psnr):
            ax.axvline(best_epoch, color="gray", linestyle=":", linewidth=1)
    fig.tight_layout()
    return _save(fig, path)


def plot_reconstructions(targets: np.ndarray, zero_filled: np.ndarray, predictions: np.ndarray, path,
                         max_rows: int = 4) -> Path:
    """Rows of target / zero-filled / reconstruction / |error| magnitude images."""
    n = min(max_rows, len(targets))
    fig, axes = plt.subplots(n, 4, figsize=(8, 2.1 * n), squeeze=False)
    titles = ("target", "zero-filled", "reconstruction", "|error|")
    for i in range(n):
        tgt = np.abs(targets[i])
        panels = (tgt, np.abs(zero_filled[i]), np.abs(predictions[i]), np.abs(np.abs(predictions[i]) - tgt))
        for j, (ax, img) in enumerate(zip(axes[i], panels)):
            ax.imshow(img, cmap="gray", vmin=0.0, vmax=1.0 if j < 3 else max(float(img.max()), 1e-12))
            ax.set_xticks([])
            ax.set_yticks([])
            if i == 0:
                ax.set_title(titles[j], fontsize=9)
    fig.tight_layout()
    return _save(fig, path)


def plot_mask(mask: np.ndarray, path, title: str = "") -> Path:
    """The 2D mask with its column profile underneath."""
    fig, (ax_img, ax_cols) = plt.subplots(2, 1, figsize=(5, 5.5), gridspec_kw={"height_ratios": [4, 1]})
    ax_img.imshow(mask, cmap="gray", vmin=0, vmax=1, aspect="auto", interpolation="nearest")
    ax_img.set_xticks([])
    ax_img.set_yticks([])
    if title:
        ax_img.set_title(title, fontsize=9)
    cols = np.asarray(mask)[0]
    ax_cols.bar(np.arange(len(cols)) - len(cols) // 2, cols, width=1.0, color="black")
    ax_cols.set_xlabel("column offset from DC")
    ax_cols.set_yticks([])
    fig.tight_layout()
    return _save(fig, path)


def plot_rf_report(rows: Sequence[dict], path) -> Path:
    """Closed-form vs measured receptive field per branch."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    idx = np.arange(len(rows))
    ax.bar(idx - 0.2, [r["closed_form"] for r in rows], width=0.4, label="closed form")
    ax.bar(idx + 0.2, [r["empirical"] for r in rows], width=0.4, label="gradient footprint")
    ax.set_xticks(idx, [f"branch {r['branch']}" for r in rows])
    ax.set_ylabel("receptive field (px)")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def plot_branches(zero_filled: np.ndarray, branch_images: Sequence[np.ndarray], path,
                  rfs: Sequence[int] | None = None) -> Path:
    """Zero-filled input next to each branch's intermediate magnitude image."""
    n = len(branch_images) + 1
    fig, axes = plt.subplots(1, n, figsize=(2.2 * n, 2.5))
    axes[0].imshow(np.abs(zero_filled), cmap="gray")
    axes[0].set_title("input", fontsize=9)
    for i, (ax, img) in enumerate(zip(axes[1:], branch_images)):
        ax.imshow(np.abs(img), cmap="gray")
        label = f"branch {i + 1}" + (f" (RF {rfs[i]})" if rfs is not None else "")
        ax.set_title(label, fontsize=9)
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    return _save(fig, path)


def plot_ablation(rows: Sequence[dict], path) -> Path:
    """Per-seed test PSNR of the dilated model and its dilation-1 ablation."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    idx = np.arange(len(rows))
    ax.bar(idx - 0.2, [r["dilated_psnr"] for r in rows], width=0.4, label="dilated")
    ax.bar(idx + 0.2, [r["ablation_psnr"] for r in rows], width=0.4, label="dilation 1")
    ax.plot(idx, [r["zero_filled_psnr"] for r in rows], "k_", markersize=20, label="zero-filled")
    ax.set_xticks(idx, [f"seed {r['seed']}" for r in rows])
    ax.set_ylabel("test PSNR (dB)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)
