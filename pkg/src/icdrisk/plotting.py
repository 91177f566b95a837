"""Report figures rendered to PNG files (non-interactive Agg backend)."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .risk import CATEGORIES  # noqa: E402

RC = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}
CATEGORY_COLORS = {"low": "#4c72b0", "intermediate": "#dd8452", "high": "#c44e52"}


def save_figure(fig, path):
    """Write a PNG atomically; metadata is stripped so bytes are reproducible."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    os.close(fd)
    try:
        fig.savefig(tmp, format="png", metadata={"Software": None})
        os.replace(tmp, path)
    finally:
        plt.close(fig)
        if os.path.exists(tmp):
            os.unlink(tmp)
    return path


def benefit_grid_figure(grid, path, title="Mortality and shock risk categories"):
    """Bubble chart of the 3x3 grid: area ~ patients, colour ~ mortality rate."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5.2, 4.4))
        counts = np.array([[grid[(m, s)].count for s in CATEGORIES] for m in CATEGORIES])
        biggest = max(counts.max(), 1)
        rates = [grid[(m, s)].mortality_rate for m in CATEGORIES for s in CATEGORIES]
        finite = [r for r in rates if r is not None]
        vmax = max(finite) if finite else 1.0
        for i, m in enumerate(CATEGORIES):
            for j, s in enumerate(CATEGORIES):
                cell = grid[(m, s)]
                if cell.count == 0:
                    continue
                rate = cell.mortality_rate or 0.0
                ax.scatter(j, i, s=2500 * cell.count / biggest, c=[rate], cmap="Reds",
                           vmin=0, vmax=vmax, edgecolors="k", linewidths=0.5)
                mr = "-" if cell.mortality_rate is None else f"{cell.mortality_rate:.1f}"
                sr = "-" if cell.shock_rate is None else f"{cell.shock_rate:.1f}"
                ax.annotate(f"n={cell.count}\nM {mr} | S {sr}", (j, i), ha="center",
                            va="center", fontsize=7)
        ax.set_xticks(range(3), CATEGORIES)
        ax.set_yticks(range(3), CATEGORIES)
        ax.set_xlim(-0.6, 2.6)
        ax.set_ylim(-0.6, 2.6)
        ax.set_xlabel("shock risk category")
        ax.set_ylabel("mortality risk category")
        ax.set_title(title)
        fig.text(0.01, 0.01, "M / S: mortality / first shock, % per year", fontsize=7)
        fig.tight_layout()
        return save_figure(fig, path)


def score_scatter(mortality_scores, shock_scores, path, r=None):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.4, 4.0))
        ax.scatter(mortality_scores, shock_scores, s=4, alpha=0.5, color="#4c72b0",
                   rasterized=True)
        ax.set_xlabel("mortality score")
        ax.set_ylabel("shock score")
        if r is not None:
            ax.set_title(f"r = {r:.2f}")
        fig.tight_layout()
        return save_figure(fig, path)


def cumulative_event_figure(curves, path, title, grid=tuple(range(7))):
    """Cumulative event probability by group with an at-risk table below.

    ``curves`` maps a group label to a survival :class:`StepCurve`.
    """
    with plt.rc_context(RC):
        fig = plt.figure(figsize=(5.6, 4.6))
        ax = fig.add_axes([0.14, 0.36, 0.82, 0.56])
        table_ax = fig.add_axes([0.14, 0.04, 0.82, 0.2])
        horizon = grid[-1]
        for label, curve in curves.items():
            t = np.concatenate([[0.0], curve.times[curve.times <= horizon], [horizon]])
            y = 1.0 - curve.value_at(t)
            ax.step(t, 100 * y, where="post", label=str(label),
                    color=CATEGORY_COLORS.get(label))
        ax.set_xlim(0, horizon)
        ax.set_ylim(bottom=0)
        ax.set_xticks(grid)
        ax.set_xlabel("years")
        ax.set_ylabel("cumulative event probability (%)")
        ax.set_title(title)
        ax.legend(frameon=False, loc="upper left")

        table_ax.set_xlim(ax.get_xlim())
        table_ax.set_ylim(-0.5, len(curves) - 0.5)
        table_ax.axis("off")
        table_ax.text(-0.1 * horizon, len(curves) - 0.2, "patients at risk", fontsize=7,
                      ha="left", va="bottom", transform=table_ax.transData)
        for row, (label, curve) in enumerate(reversed(list(curves.items()))):
            table_ax.text(-0.02 * horizon, row, str(label), ha="right", va="center", fontsize=7)
            for x, n in zip(grid, curve.at_risk_grid):
                table_ax.text(x, row, str(int(n)), ha="center", va="center", fontsize=7)
        return save_figure(fig, path)
