"""Figures for the ``report`` command, rendered headless to image files."""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

OP_LABELS = ("max", "min", "mul", "add")


def loss_curves(curves: Mapping[str, Sequence[dict]], path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    for phase, recs in curves.items():
        if not recs or phase.startswith("random_"):
            continue
        ep = [r["epoch"] for r in recs]
        ax.plot(ep, [r["train_loss"] for r in recs], label=f"{phase} train")
        ax.plot(ep, [r["val_loss"] for r in recs], linestyle="--", label=f"{phase} val")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean task MSE (normalized)")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def alpha_heatmap(alphas: np.ndarray, path: Path, selected: np.ndarray = None) -> Path:
    alphas = np.asarray(alphas)
    fig, ax = plt.subplots(figsize=(4.5, 0.6 * alphas.shape[0] + 1.5))
    im = ax.imshow(alphas, cmap="viridis", aspect="auto")
    ax.set_xticks(range(4), OP_LABELS)
    ax.set_yticks(range(alphas.shape[0]), [f"layer {l}" for l in range(alphas.shape[0])])
    for (l, k), v in np.ndenumerate(alphas):
        mark = "*" if selected is not None and selected[l, k] else ""
        ax.text(k, l, f"{v:.2f}{mark}", ha="center", va="center", color="w", fontsize=8)
    fig.colorbar(im, ax=ax, label="alpha")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def search_curves(curves: Mapping[str, Sequence[tuple[int, float, float]]], path: Path) -> Path:
    """Best-so-far validation loss against wall-clock time, one line per strategy."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, pts in curves.items():
        if pts:
            ax.step([p[1] for p in pts], [p[2] for p in pts], where="post", label=name)
    ax.set_xlabel("seconds")
    ax.set_ylabel("best validation MSE")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def support_sweep(fractions: Sequence[float], mses: Sequence[float], path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(fractions, mses, marker="o")
    ax.set_xlabel("fraction of support set kept")
    ax.set_ylabel("test MSE (x100)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
