"""Figures for reports. Every function writes a PNG and returns its path."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 120,
    "savefig.dpi": 150,
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _figure(width=4.0, height=None, ncols=1):
    height = height or width * 0.68
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, ncols, figsize=(width * ncols, height))
    return fig, axes


def _save(fig, path) -> Path:
    path = Path(path)
    with plt.rc_context(STYLE):
        fig.tight_layout()
        fig.savefig(path, format="png")
    plt.close(fig)
    return path


def plot_trigger(trigger_values: np.ndarray, clean: np.ndarray, poisoned: np.ndarray, path) -> Path:
    """Clean sample, poisoned sample, and the trigger magnitude map."""
    fig, axes = _figure(2.4, 2.6, ncols=3)
    magnitude = np.abs(trigger_values).max(axis=-1)
    for ax, img, title in zip(axes, (clean, poisoned), ("clean", "poisoned")):
        ax.imshow(np.squeeze(np.clip(img, 0, 1)), cmap="gray" if img.shape[-1] == 1 else None)
        ax.set_title(title)
    im = axes[2].imshow(magnitude, cmap="magma")
    axes[2].set_title(f"|trigger|, L0={np.count_nonzero(trigger_values)}")
    fig.colorbar(im, ax=axes[2], fraction=0.046)
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    return _save(fig, path)


def plot_loss_trace(losses, mask_updates, path) -> Path:
    fig, ax = _figure()
    ax.plot(np.arange(len(losses)), losses, lw=1.2, color="C0")
    for i in mask_updates:
        ax.axvline(i, color="0.85", lw=0.5, zorder=0)
    ax.set_xlabel("iteration")
    ax.set_ylabel("targeted cross-entropy")
    return _save(fig, path)


def plot_sweep(axis_name: str, values, ba, asr, path) -> Path:
    fig, ax = _figure()
    ax.plot(values, 100 * np.asarray(ba), "o-", label="BA")
    ax.plot(values, 100 * np.asarray(asr), "s-", label="ASR")
    ax.set_xlabel(axis_name)
    ax.set_ylabel("%")
    ax.set_ylim(0, 102)
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_transfer_matrix(archs, matrix, path, title="ASR (%)") -> Path:
    fig, ax = _figure(3.6, 3.2)
    m = 100 * np.asarray(matrix)
    im = ax.imshow(m, vmin=0, vmax=100, cmap="viridis")
    ax.set_xticks(range(len(archs)), archs, rotation=30, ha="right")
    ax.set_yticks(range(len(archs)), archs)
    ax.set_xlabel("victim")
    ax.set_ylabel("surrogate")
    for (i, j), v in np.ndenumerate(m):
        ax.text(j, i, f"{v:.1f}", ha="center", va="center", color="w" if v < 60 else "k", fontsize=8)
    ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.046)
    return _save(fig, path)


def plot_fine_pruning(curve, path) -> Path:
    counts, ba, asr = zip(*curve)
    fig, ax = _figure()
    ax.plot(counts, 100 * np.asarray(ba), "o-", label="BA", ms=3)
    ax.plot(counts, 100 * np.asarray(asr), "s-", label="ASR", ms=3)
    ax.set_xlabel("pruned channels")
    ax.set_ylabel("%")
    ax.set_ylim(0, 102)
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_anomaly_indices(anomaly, path, threshold: float = 2.0) -> Path:
    fig, ax = _figure()
    a = np.nan_to_num(np.asarray(anomaly, dtype=float), nan=0.0, posinf=10.0)
    ax.bar(np.arange(len(a)), a, color="C0")
    ax.axhline(threshold, color="C3", ls="--", lw=1, label=f"threshold {threshold:g}")
    ax.set_xlabel("class")
    ax.set_ylabel("anomaly index")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_score_histograms(benign, poisoned, path, xlabel="entropy") -> Path:
    fig, ax = _figure()
    bins = np.histogram_bin_edges(np.concatenate([benign, poisoned]), bins=30)
    ax.hist(benign, bins=bins, alpha=0.6, label="benign", density=True)
    ax.hist(poisoned, bins=bins, alpha=0.6, label="poisoned", density=True)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("density")
    ax.legend(frameon=False)
    return _save(fig, path)
