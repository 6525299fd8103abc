"""Report figures, rendered off-screen to PNG files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from dspeech.alphabet import ALPHABET  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_posteriors(log_probs: np.ndarray, path, title: str = "") -> Path:
    """Heat map of per-step character probabilities (symbols on the y axis)."""
    probs = np.exp(np.asarray(log_probs))
    fig, ax = plt.subplots(figsize=(max(4.0, probs.shape[0] * 0.15), 5.0))
    ax.imshow(probs.T, aspect="auto", origin="lower", cmap="magma", vmin=0.0, vmax=1.0)
    labels = [("_" if s == " " else s) for s in ALPHABET.chars] + ["∅"]
    if probs.shape[1] == len(labels):
        ax.set_yticks(range(len(labels)), labels, fontsize=6)
    ax.set_xlabel("output step")
    ax.set_title(title)
    return _save(fig, path)


def plot_error_rates(ids, wers, cers, path) -> Path:
    x = np.arange(len(ids))
    fig, ax = plt.subplots(figsize=(max(4.0, 0.4 * len(ids)), 3.5))
    ax.bar(x - 0.2, wers, width=0.4, label="WER")
    ax.bar(x + 0.2, cers, width=0.4, label="CER")
    ax.set_xticks(x, ids, rotation=60, fontsize=7)
    ax.set_ylabel("error rate")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def plot_training_curve(metrics: list[dict], path) -> Path:
    fig, ax = plt.subplots(figsize=(5.0, 3.5))
    ax.plot([m["epoch"] for m in metrics], [m["mean_loss"] for m in metrics], marker=".")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean CTC loss")
    ax.set_yscale("log")
    fig.tight_layout()
    return _save(fig, path)
