"""Optional SVG line plots of the figure tables."""

import logging
from collections.abc import Sequence
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

logger = logging.getLogger(__name__)

# fixed element ids keep repeated renders byte-identical
matplotlib.rcParams["svg.hashsalt"] = "certified-network-rb"


def plot_table(
    frame: pd.DataFrame,
    x: str,
    columns: Sequence[str],
    path: Path,
    title: str = "",
    log_y: bool = True,
) -> Path:
    """Plot columns of a table against one column and save it as SVG."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    try:
        for column in columns:
            values = frame[column]
            if log_y:
                values = values.where(values > 0)
            ax.plot(frame[x], values, label=column, marker="." if len(frame) < 50 else None)
        if log_y:
            ax.set_yscale("log")
        ax.set_xlabel(x)
        ax.set_title(title)
        ax.grid(True, which="both", alpha=0.3)
        if columns:
            ax.legend()
        fig.tight_layout()
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, format="svg", metadata={"Date": None})
    finally:
        plt.close(fig)
    logger.debug(f"Saved plot {path}")
    return path
