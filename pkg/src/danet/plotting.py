"""Figures for the report path. Every figure is written as a PNG file."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

COLOURS = ["tab:blue", "tab:orange", "tab:green", "tab:red"]


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_history(history, path):
    """Training and validation loss per epoch, log scale."""
    ep = [h["epoch"] for h in history]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.semilogy(ep, [h["train_loss"] for h in history], label="train")
    ax.semilogy(ep, [h["val_loss"] for h in history], label="valid")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    return _save(fig, path)


def plot_embedding(points, dominant, is_attractor, path, max_points=4000, seed=0):
    """3-D PCA scatter of bin embeddings coloured by dominant source, attractors as stars."""
    points = np.asarray(points)
    dominant = np.asarray(dominant)
    flag = np.asarray(is_attractor).astype(bool)
    bins = np.flatnonzero(~flag)
    if len(bins) > max_points:
        bins = np.sort(np.random.default_rng(seed).choice(bins, max_points, replace=False))
    fig = plt.figure(figsize=(5, 4.5))
    ax = fig.add_subplot(projection="3d")
    for c in np.unique(dominant[bins]):
        sel = bins[dominant[bins] == c]
        ax.scatter(*points[sel].T, s=2, alpha=0.3, color=COLOURS[c % len(COLOURS)],
                   label=f"source {c}")
    for i in np.flatnonzero(flag):
        ax.scatter(*points[i], s=200, marker="*", edgecolor="k",
                   color=COLOURS[dominant[i] % len(COLOURS)])
    ax.set_xlabel("PC1")
    ax.set_ylabel("PC2")
    ax.set_zlabel("PC3")
    ax.legend(loc="upper left", markerscale=4)
    return _save(fig, path)


def plot_attractor_population(coords, path):
    """Attractor points of many mixtures in the first two principal components.

    ``coords`` is (n_mixtures, C, 2+); point c of every mixture shares a colour.
    """
    coords = np.asarray(coords)
    fig, ax = plt.subplots(figsize=(4.5, 4))
    for c in range(coords.shape[1]):
        ax.scatter(coords[:, c, 0], coords[:, c, 1], s=12, color=COLOURS[c % len(COLOURS)],
                   label=f"attractor {c}")
    ax.axhline(0, color="0.8", lw=0.5)
    ax.axvline(0, color="0.8", lw=0.5)
    ax.set_xlabel("PC1")
    ax.set_ylabel("PC2")
    ax.legend()
    return _save(fig, path)


def plot_metrics(summary, path, title=""):
    keys = ["gnsdr", "gsir", "gsar"]
    fig, ax = plt.subplots(figsize=(4, 3))
    vals = [summary[k] for k in keys]
    ax.bar([k.upper() for k in keys], vals, color=COLOURS[:3])
    for i, v in enumerate(vals):
        ax.text(i, v, f"{v:.1f}", ha="center", va="bottom")
    ax.set_ylabel("dB")
    if title:
        ax.set_title(title)
    return _save(fig, path)
