"""Deviation bar chart: mean absolute error per task for vision and multimodal
tracking, one panel per camera condition."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .stats import ReportRow  # noqa: E402

_LABELS = {"full_view": "Full view", "occluded": "Occluded"}


def plot_deviations(rows: Sequence[ReportRow], path) -> Path:
    """Write a PNG of mean deviation (error bars: std) with *** over significant pairs."""
    path = Path(path)
    conditions = list(dict.fromkeys(r.condition for r in rows)) or ["full_view"]
    tasks = list(dict.fromkeys(r.task for r in rows))
    by_key = {(r.task, r.condition): r for r in rows}
    fig, axes = plt.subplots(1, len(conditions), figsize=(5.5 * len(conditions), 4), sharey=True,
                             squeeze=False)
    x = np.arange(len(tasks))
    width = 0.38
    for ax, cond in zip(axes[0], conditions):
        cells = [by_key.get((t, cond)) for t in tasks]

        def col(attr):
            return np.array([np.nan if r is None or r.missing else getattr(r, attr) for r in cells])

        mv, sv, mm, sm = col("mean_V"), col("std_V"), col("mean_M"), col("std_M")
        ax.bar(x - width / 2, mv, width, yerr=sv, capsize=3, label="Vision", color="#8c8c8c")
        ax.bar(x + width / 2, mm, width, yerr=sm, capsize=3, label="Multimodal", color="#3b6ea8")
        for i, r in enumerate(cells):
            if r is not None and r.significant:
                top = np.nanmax([mv[i] + sv[i], mm[i] + sm[i]])
                ax.text(x[i], top * 1.04 + 0.5, "***", ha="center", va="bottom")
            if r is None or r.missing:
                ax.text(x[i], 0.5, "n/a", ha="center", va="bottom", fontsize=8)
        ax.set_xticks(x, [f"({t})" for t in tasks])
        ax.set_title(_LABELS.get(cond, cond))
        ax.set_xlabel("Task")
    axes[0][0].set_ylabel("Mean absolute deviation (deg)")
    axes[0][0].legend(loc="upper left")
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path
