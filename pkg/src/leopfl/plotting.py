"""PNG figures for aggregated run data."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_curves(path: Path | str, x: np.ndarray, series: Mapping[str, tuple[np.ndarray, np.ndarray]],
                ylabel: str, xlabel: str = "FL round", title: str | None = None) -> None:
    """One line per series with a +-1 std band."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for label, (mean, std) in series.items():
        mean = np.asarray(mean, dtype=float)
        std = np.asarray(std, dtype=float)
        ax.plot(x, mean, label=label, linewidth=1.5)
        if np.any(std > 0):
            ax.fill_between(x, mean - std, mean + std, alpha=0.2)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.3)
    if len(series) > 1:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_bars(path: Path | str, labels, values, ylabel: str, title: str | None = None) -> None:
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.bar(list(labels), list(values), color="tab:blue")
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
