"""Matplotlib renderings of the study figures.

The byte-stable SVG documents from :mod:`melsmlab.report` are the golden-
tested output; these PNG companions are for humans reading the results.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .report import BoxGroup, box_stats  # noqa: E402


def render_boxplot_png(groups: list[BoxGroup], truth: float | None, path: str | Path,
                       title: str = "", xlabel: str = "estimate") -> None:
    fig, ax = plt.subplots(figsize=(7.2, 0.5 * len(groups) + 1.6))
    stats = []
    for g in groups:
        st = box_stats(g.estimates)
        stats.append(
            {
                "label": g.label,
                "med": st["median"],
                "q1": st["q1"],
                "q3": st["q3"],
                "whislo": st["whisker_low"],
                "whishi": st["whisker_high"],
                "fliers": st["outliers"],
            }
        )
    positions = list(range(len(groups), 0, -1))
    ax.bxp(stats, positions=positions, vert=False, showfliers=True,
           boxprops={"color": "#31708f"}, medianprops={"color": "#31708f"})
    if truth is not None:
        ax.axvline(truth, color="#cc0000", linewidth=1.5)
    for g, pos in zip(groups, positions):
        if g.coverage_percent is not None:
            ax.annotate(
                f"{g.coverage_percent:.0f}%",
                xy=(1.01, pos), xycoords=("axes fraction", "data"),
                va="center", fontsize=9,
            )
    ax.set_xlabel(xlabel)
    if title:
        ax.set_title(title)
    fig.subplots_adjust(right=0.88)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
