"""Score-timeline figure: per-frame probability with the active decision band."""

from __future__ import annotations

from pathlib import Path

import numpy as np

THRESHOLD = 0.5


def active_mask(scores, threshold: float = THRESHOLD) -> np.ndarray:
    return np.asarray(scores, dtype=np.float64) > threshold


def plot_timeline(scores, path: str | Path, fps: float = 25.0, labels=None, title: str | None = None,
                  threshold: float = THRESHOLD) -> np.ndarray:
    """Write a PNG and return the boolean mask that was shaded as "active"."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    scores = np.asarray(scores, dtype=np.float64)
    mask = active_mask(scores, threshold)
    t = np.arange(len(scores)) / fps
    fig, ax = plt.subplots(figsize=(10, 3))
    ax.plot(t, scores, color="black", lw=1.0, label="score")
    ax.axhline(threshold, color="grey", ls="--", lw=0.8)
    # shade each frame's full 1/fps interval so the band reads frame-exact
    ax.fill_between(np.r_[t, t[-1] + 1 / fps] if len(t) else t, 0, 1,
                    where=np.r_[mask, mask[-1:]] if len(mask) else mask,
                    step="post", color="tab:green", alpha=0.25, label="active (> %.2g)" % threshold)
    if labels is not None:
        ax.step(t, np.asarray(labels) * 1.0, where="post", color="tab:blue", lw=0.8, alpha=0.7, label="label")
    ax.set_ylim(-0.02, 1.02)
    ax.set_xlabel("time (s)")
    ax.set_ylabel("P(speaking)")
    if title:
        ax.set_title(title)
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return mask
