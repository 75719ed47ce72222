"""Report figures, rendered off-screen to PNG files."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _finish(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path


def metric_boxplot(values: Mapping[str, Sequence[float]], metric: str, path: Path) -> Path:
    """One box per method."""
    methods = [m for m in values if len(values[m])]
    fig, ax = plt.subplots(figsize=(1.2 * max(len(methods), 3) + 1, 3.5))
    ax.boxplot([values[m] for m in methods], showmeans=True)
    ax.set_xticks(range(1, len(methods) + 1), methods, rotation=30, ha="right")
    ax.set_ylabel(metric)
    ax.grid(axis="y", alpha=0.3)
    return _finish(fig, path)


def covariance_scatter(points: Mapping[str, tuple], path: Path) -> Path:
    """Mean local vs global covariance summary per method, with std bars.

    ``points`` maps method to ``(local_mean, local_std, global_mean, global_std)``.
    """
    fig, ax = plt.subplots(figsize=(4.5, 4.0))
    for m, (lm, ls, gm, gs) in points.items():
        ax.errorbar(lm, gm, xerr=ls, yerr=gs, fmt="o", capsize=3, label=m)
    lim = max([max(p[0] + p[1], p[2] + p[3]) for p in points.values()] + [1e-3]) * 1.1
    ax.plot([0, lim], [0, lim], color="grey", lw=0.8, ls="--")
    ax.set_xlim(0, lim)
    ax.set_ylim(0, lim)
    ax.set_xlabel("local covariance summary")
    ax.set_ylabel("global covariance summary")
    ax.legend(fontsize=7)
    return _finish(fig, path)


def read_round_losses(path: Path) -> tuple[np.ndarray, np.ndarray]:
    rounds, losses = [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            if rec.get("global_loss") is not None:
                rounds.append(rec["round"])
                losses.append(rec["global_loss"])
    return np.array(rounds), np.array(losses)


def validation_curves(curves: Mapping[str, tuple], path: Path, ylabel: str = "validation loss") -> Path:
    """``curves`` maps a label to ``(rounds, losses)``."""
    fig, ax = plt.subplots(figsize=(5.0, 3.5))
    for label, (r, loss) in curves.items():
        if len(r):
            ax.plot(r, loss, label=label)
    ax.set_xlabel("communication round")
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=7)
    ax.grid(alpha=0.3)
    return _finish(fig, path)
