"""Static timeline plots: ground truth vs top-scored proposals."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .data import VideoRecord


def plot_video_timeline(rec: VideoRecord, proposals, path, top_k: int = 10) -> None:
    """Horizontal-bar timeline: ground-truth segments on top, the ``top_k``
    proposals below with color mapped to score."""
    rows = sorted(proposals, key=lambda r: -r[2])[:top_k]
    fig, ax = plt.subplots(figsize=(9, 1.2 + 0.32 * (len(rows) + 1)))
    for a in rec.actions:
        ax.barh(0, a.end - a.start, left=a.start, height=0.62,
                color="#2a9d3c", edgecolor="black", linewidth=0.4)
    cmap = plt.get_cmap("viridis")
    for i, (s, e, score) in enumerate(rows, start=1):
        ax.barh(-i, e - s, left=s, height=0.62, color=cmap(score),
                edgecolor="black", linewidth=0.3)
        ax.text(e + rec.duration_seconds * 0.005, -i, f"{score:.3f}",
                va="center", fontsize=7)
    ax.set_xlim(0, rec.duration_seconds)
    ax.set_yticks([0] + [-i for i in range(1, len(rows) + 1)])
    ax.set_yticklabels(["ground truth"] + [f"#{i}" for i in range(1, len(rows) + 1)],
                       fontsize=7)
    ax.set_xlabel("seconds")
    ax.set_title(rec.video_id, fontsize=9)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110)
    plt.close(fig)
