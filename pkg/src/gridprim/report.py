"""Figure rendering for extraction and benchmark reports.

Figures are written straight to files; the Agg backend keeps this usable in
headless runs.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import InputError


def save_label_figure(path: str | Path, labels: np.ndarray, depth_m: np.ndarray | None = None) -> None:
    """Render the label image, optionally over the depth map, to a file.

    Args:
        path: output image path; the extension picks the format.
        labels: (H, W) integer labels, 0 meaning unassigned.
        depth_m: optional (H, W) metric depth drawn as a grayscale underlay.
    """
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise InputError(f"label image must be 2-D, got shape {labels.shape}")
    fig, ax = plt.subplots(figsize=(8, 6), dpi=120)
    if depth_m is not None:
        ax.imshow(np.asarray(depth_m), cmap="gray", interpolation="nearest")
    shown = np.ma.masked_equal(labels, 0)
    ax.imshow(shown, cmap="tab20", interpolation="nearest", alpha=0.85, vmin=1)
    n = int(labels.max())
    ax.set_title(f"{n} primitive{'s' if n != 1 else ''}")
    ax.set_axis_off()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_timing_figure(path: str | Path, samples: dict[str, list[float]]) -> None:
    """Render per-stage wall-time distributions (microseconds) to a file."""
    if not samples:
        raise InputError("no timing samples to plot")
    names = list(samples)
    data = [np.asarray(v, dtype=np.float64) * 1e6 for v in samples.values()]
    if any(d.size == 0 for d in data):
        raise InputError("every stage needs at least one sample")
    fig, ax = plt.subplots(figsize=(8, 4.5), dpi=120)
    ax.boxplot(data, tick_labels=names, whis=(5, 95), showfliers=True)
    ax.set_ylabel("wall time (us)")
    ax.set_title("per-stage timing over runs")
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
