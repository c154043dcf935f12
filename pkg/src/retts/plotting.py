"""Figures written next to CLI outputs."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_mel(mel: np.ndarray, path, title: str = "", boundaries=()) -> Path:
    """Mel-spectrogram heat map; vertical lines mark splice boundaries."""
    fig, ax = plt.subplots(figsize=(8, 3))
    im = ax.imshow(np.asarray(mel).T, origin="lower", aspect="auto", cmap="magma",
                   interpolation="none")
    for b in boundaries:
        ax.axvline(b - 0.5, color="cyan", lw=1.2, ls="--")
    ax.set_xlabel("frame")
    ax.set_ylabel("mel channel")
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax, pad=0.01)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_similarity(matrix: np.ndarray, labels, path, title: str = "cosine similarity") -> Path:
    fig, ax = plt.subplots(figsize=(6, 5))
    im = ax.imshow(matrix, cmap="viridis", interpolation="none")
    ticks = np.arange(len(labels))
    # label only speaker changes, utterance ids get unreadable past a few dozen
    marks = [i for i in ticks if i == 0 or labels[i] != labels[i - 1]]
    ax.set_xticks(marks)
    ax.set_xticklabels([labels[i] for i in marks], rotation=90, fontsize=7)
    ax.set_yticks(marks)
    ax.set_yticklabels([labels[i] for i in marks], fontsize=7)
    ax.set_title(title)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_losses(records: list[dict], path, keys=("mel_mse", "dur_mse", "pitch_mse", "energy_mse")) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    steps = [int(r["step"]) for r in records]
    for key in keys:
        if key in records[0]:
            ax.semilogy(steps, [float(r[key]) for r in records], label=key)
    ax.set_xlabel("step")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
