"""Report figures (matplotlib, file output only)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# PNG metadata would otherwise carry the matplotlib version string
_META = {"Software": None}


def plot_loss_curve(history: list[dict], path, columns=("mse", "laplacian", "normal", "edge", "floor", "total")):
    it = np.array([row["iter"] for row in history])
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for name in columns:
        vals = np.array([row[name] for row in history], dtype=float)
        if np.any(vals > 0):
            ax.plot(it, np.where(vals > 0, vals, np.nan), lw=1.0, label=name)
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8, ncol=3)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def plot_features(features, image, path, title: str | None = None):
    """Four panels: silhouette, normal-dot, alpha and the shaded image."""
    panels = [("silhouette", features.silhouette.data, (0, 1)),
              ("normal . illumination", features.normal_dot.data, (-1, 1)),
              ("alpha", features.alpha.data, (0, 1)),
              ("image", np.asarray(image), (0, max(float(np.max(image)), 1e-12)))]
    fig, axes = plt.subplots(1, 4, figsize=(12, 3.4))
    for ax, (name, data, (lo, hi)) in zip(axes, panels):
        im = ax.imshow(data, cmap="gray", vmin=lo, vmax=hi, interpolation="nearest")
        ax.set_title(name, fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def plot_shader_training(train_l1, val_l1, path):
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    ax.plot(np.arange(len(train_l1)), train_l1, label="train")
    if val_l1:
        ax.plot(np.arange(len(val_l1)), val_l1, label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("L1")
    ax.set_yscale("log")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
