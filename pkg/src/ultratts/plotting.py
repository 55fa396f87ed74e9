"""Figure rendering for reports (PNG files, Agg backend)."""

import re
from collections import OrderedDict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .codec import render_wedge  # noqa: E402

_COL_RE = re.compile(r"^(?P<series>.+)_pca(?P<dim>\d+)$")


def plot_trajectory_table(header, table, path, title=None):
    """One panel per coefficient; every series of that coefficient overlaid."""
    t = table[:, 0]
    panels = OrderedDict()
    for j, name in enumerate(header[1:], start=1):
        m = _COL_RE.match(name)
        if m is None:
            continue
        panels.setdefault(int(m["dim"]), []).append((m["series"], table[:, j]))
    fig, axes = plt.subplots(len(panels), 1, sharex=True,
                             figsize=(8, 1.3 * len(panels) + 0.8), squeeze=False)
    for ax, (dim, series) in zip(axes[:, 0], panels.items()):
        for k, (label, y) in enumerate(series):
            ax.plot(t, y, lw=1.4 if k == 0 else 1.0, label=label,
                    color="k" if k == 0 else None)
        ax.set_ylabel(f"PCA-{dim}", rotation=0, ha="right", va="center", fontsize=8)
        ax.tick_params(labelsize=7)
    axes[0, 0].legend(fontsize=7, loc="upper right", ncol=len(panels[next(iter(panels))]))
    axes[-1, 0].set_xlabel("time [s]")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_video_strip(series, geometry, path, stride=3, max_frames=10):
    """Rows of wedge-rendered frames, every ``stride``-th frame, frame number in the corner."""
    names = list(series)
    n = min(len(v) for v in series.values())
    picks = list(range(0, n, stride))[:max_frames]
    fig, axes = plt.subplots(len(names), len(picks), squeeze=False,
                             figsize=(1.4 * len(picks), 1.2 * len(names) + 0.3))
    for r, name in enumerate(names):
        for c, k in enumerate(picks):
            ax = axes[r, c]
            img = render_wedge(np.clip(series[name][k], 0, 255), geometry)
            ax.imshow(img, cmap="gray", vmin=0, vmax=255)
            ax.text(0.02, 0.02, str(k), color="w", fontsize=6, transform=ax.transAxes)
            ax.set_xticks([])
            ax.set_yticks([])
        axes[r, 0].set_ylabel(name, fontsize=8)
    fig.tight_layout(pad=0.2)
    fig.savefig(path, dpi=100)
    plt.close(fig)
