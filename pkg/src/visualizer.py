"""
Visualization utilities for risk model evaluation.
Renders detection-rate curves, rank-difference accumulation, feature
importance and supplier-cohort degree distributions as SVG files.
"""

import io
import logging
from typing import Mapping, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
import seaborn as sns

from utils import PathLike, atomic_write_text

logger = logging.getLogger(__name__)

# fixed salt and no date stamp keep the SVG bytes identical across runs
SVG_HASHSALT = "scrisk"


class RiskVisualizer:
    """Creates SVG plots for the evaluation artifacts"""

    def __init__(self):
        plt.style.use('seaborn-v0_8')
        matplotlib.rcParams["svg.hashsalt"] = SVG_HASHSALT
        self.color_palette = sns.color_palette("Set2")

    def _save(self, fig, path: PathLike):
        buffer = io.StringIO()
        fig.savefig(buffer, format="svg", metadata={"Date": None}, bbox_inches="tight")
        plt.close(fig)
        return atomic_write_text(path, buffer.getvalue())

    def plot_detection_curves(self, curves: Mapping[int, Sequence[Tuple[float, float]]], path: PathLike,
                              max_fraction: float = 0.2):
        """Recall against the top fraction of entities for every model tier"""
        fig, ax = plt.subplots(figsize=(6, 4.5))
        for i, (tier, curve) in enumerate(sorted(curves.items())):
            points = np.asarray([p for p in curve if p[0] <= max_fraction] or curve[:1], dtype=float)
            ax.plot(points[:, 0] * 100, points[:, 1] * 100, label=f"Model {tier}", color=self.color_palette[i])
        ax.plot([0, max_fraction * 100], [0, max_fraction * 100], linestyle="--", color="grey", label="Random")
        ax.set_xlabel("Top entities by predicted risk (%)")
        ax.set_ylabel("Breached entities detected (%)")
        ax.set_title("Detection rate")
        ax.legend()
        return self._save(fig, path)

    def plot_rank_difference(self, frame: pd.DataFrame, path: PathLike, title: str = "Rank difference"):
        """Observed cumulative breaches along the rank-difference ordering against the random line"""
        fig, ax = plt.subplots(figsize=(6, 4.5))
        ax.plot(frame["position"], frame["cumulative_breaches"], label="Observed", color=self.color_palette[0])
        ax.plot(frame["position"], frame["expected_breaches"], label="Random ordering", linestyle="--",
                color="grey")
        positive = int((frame["rank_diff"] > 0).sum())
        if 0 < positive < len(frame):
            ax.axvline(positive + 0.5, color=self.color_palette[1], linewidth=0.8, label="Rank difference = 0")
        ax.set_xlabel("Entities ordered by rank difference")
        ax.set_ylabel("Cumulative breaches")
        ax.set_title(title)
        ax.legend()
        return self._save(fig, path)

    def plot_importance(self, importance: pd.DataFrame, path: PathLike, top_k: Optional[int] = 20):
        """Horizontal bar chart of mean |Shapley| per feature"""
        shown = importance.head(top_k) if top_k else importance
        fig, ax = plt.subplots(figsize=(7, max(2.5, 0.3 * len(shown) + 1)))
        ax.barh(shown["feature"][::-1], shown["mean_abs_phi"][::-1], color=self.color_palette[2])
        ax.set_xlabel("Mean |Shapley impact| (log-odds)")
        ax.set_title("Feature importance")
        return self._save(fig, path)

    def plot_degree_cohorts(self, degrees: Mapping[str, Sequence[int]], path: PathLike):
        """Entity degree distribution of each supplier cohort"""
        frame = pd.DataFrame([(cohort, d) for cohort, values in degrees.items() for d in values],
                             columns=["cohort", "degree"])
        fig, ax = plt.subplots(figsize=(7, 4.5))
        if len(frame):
            sns.boxplot(data=frame, x="cohort", y="degree", ax=ax, palette=self.color_palette)
            ax.set_yscale("log")
        ax.set_xlabel("")
        ax.set_ylabel("Entity degree (distinct suppliers)")
        ax.set_title("Entity degree by supplier connectivity cohort")
        return self._save(fig, path)
