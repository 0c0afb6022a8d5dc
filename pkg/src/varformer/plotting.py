"""Figures written next to the CSV reports."""

from __future__ import annotations

import os
from typing import Dict, Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

matplotlib.rcParams.update({
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
})


def _save(fig, path: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def _smooth(y: np.ndarray, k: int) -> np.ndarray:
    if k <= 1 or len(y) < k:
        return y
    return np.convolve(y, np.ones(k) / k, mode="valid")


def plot_loss_curves(curves: Mapping[str, object], path: str, smooth: int = 20) -> str:
    """One line per curve (raw loss faint, moving average solid); ``curves`` values expose ``losses()``."""
    fig, ax = plt.subplots(figsize=(4.5, 3))
    for i, (name, curve) in enumerate(curves.items()):
        y = np.asarray(curve.losses())
        color = f"C{i}"
        ax.plot(y, color=color, alpha=0.25, lw=0.6)
        ys = _smooth(y, smooth)
        ax.plot(np.arange(len(ys)) + (len(y) - len(ys)), ys, color=color, lw=1.2, label=name)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    return _save(fig, path)


def plot_probe_grid(grid, clean_images, row_labels: Sequence[str], col_labels: Sequence[str], path: str) -> str:
    """Rows: (pair, degradation); first column the clean reference, then one column per pattern."""
    rows = [(p, d) for p in range(len(grid)) for d in range(len(grid[p]))]
    ncol = len(col_labels) + 1
    fig, axes = plt.subplots(len(rows), ncol, figsize=(1.1 * ncol, 1.15 * len(rows)), squeeze=False)
    for r, (p, d) in enumerate(rows):
        cells = [clean_images[p]] + list(grid[p][d])
        for c, img in enumerate(cells):
            ax = axes[r][c]
            ax.imshow(np.clip(np.transpose(img, (1, 2, 0)), 0, 1))
            ax.set_xticks([])
            ax.set_yticks([])
            if r == 0:
                ax.set_title("clean" if c == 0 else col_labels[c - 1], fontsize=7)
        axes[r][0].set_ylabel(row_labels[r], fontsize=6)
    return _save(fig, path)


def plot_gap_report(reports, path: str) -> str:
    """Per family, encoder vs transformer distribution gap at each scale."""
    n = len(reports)
    fig, axes = plt.subplots(1, n, figsize=(2.2 * n, 2.4), squeeze=False, sharey=False)
    for ax, rep in zip(axes[0], reports):
        k = np.arange(1, len(rep.per_scale_gap_encoder) + 1)
        ax.bar(k - 0.2, rep.per_scale_gap_encoder, 0.4, label="encoder")
        ax.bar(k + 0.2, rep.per_scale_gap_transformer, 0.4, label="transformer")
        ax.set_title(rep.degradation, fontsize=8)
        ax.set_xlabel("scale")
        ax.set_xticks(k)
    axes[0][0].set_ylabel("mean-feature gap")
    axes[0][0].legend()
    return _save(fig, path)


def plot_pca_scatter(points: Dict[str, np.ndarray], path: str, title: str = "") -> str:
    fig, ax = plt.subplots(figsize=(3.2, 3.2))
    for i, (name, xy) in enumerate(points.items()):
        ax.scatter(xy[:, 0], xy[:, 1], s=6, alpha=0.7, color=f"C{i}", label=name)
    ax.set_title(title)
    ax.set_xticks([])
    ax.set_yticks([])
    ax.legend(markerscale=2)
    return _save(fig, path)


def plot_metrics(summary: Mapping[str, Mapping[str, float]], path: str) -> str:
    """Per-family mean PSNR and SSIM bars; ``summary[family] = {"psnr": .., "ssim": ..}``."""
    fams = list(summary)
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(1.2 * len(fams) + 3, 2.6))
    x = np.arange(len(fams))
    a1.bar(x, [summary[f]["psnr"] for f in fams], color="C0")
    a2.bar(x, [summary[f]["ssim"] for f in fams], color="C1")
    for ax, lab in ((a1, "PSNR (dB)"), (a2, "SSIM")):
        ax.set_xticks(x)
        ax.set_xticklabels(fams, rotation=35, ha="right")
        ax.set_ylabel(lab)
    return _save(fig, path)


def plot_weight_maps(image: np.ndarray, w_prior: np.ndarray, path: str) -> str:
    """Degraded input next to the channel-averaged prior fusion weight."""
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(4, 2))
    a1.imshow(np.clip(np.transpose(image, (1, 2, 0)), 0, 1))
    im = a2.imshow(w_prior, cmap="magma", vmin=0, vmax=1)
    fig.colorbar(im, ax=a2, fraction=0.046)
    for ax, t in ((a1, "input"), (a2, "prior weight")):
        ax.set_xticks([])
        ax.set_yticks([])
        ax.set_title(t)
    return _save(fig, path)
