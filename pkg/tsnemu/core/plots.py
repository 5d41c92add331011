"""
SVG box plots of latency figures
"""
import logging
from pathlib import Path
from typing import Dict, List, Mapping, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from tsnemu.core.model import NS_PER_US, TimeNs  # noqa: E402

logger = logging.getLogger(__name__)

FIGURE_TITLES = {
    "sendL": "Talker send latency (T2 - T1)",
    "br1L": "Bridge 1 latency (T3 - T2)",
    "br2L": "Bridge 2 latency (T4 - T3)",
    "arrL": "Listener arrival latency (T5 - T4)",
    "e2e": "End-to-end latency (T5 - T1)",
    "e2e_nic": "End-to-end NIC latency (T4 - T1)",
}

# stable output across runs of the same data
plt.rcParams["svg.hashsalt"] = "tsnemu"


def box_plot(figure: str, groups: Mapping[str, Sequence[TimeNs]], path: Union[str, Path]) -> Path:
    """
    One box plot per group of a latency figure, values in microseconds

    Whiskers at 1.5 IQR; points beyond them are drawn as outliers.
    """
    labels = list(groups)
    data: List[List[float]] = [[v / NS_PER_US for v in groups[label]] for label in labels]
    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(labels) + 2), 4.5))
    try:
        ax.boxplot(data, whis=1.5, showmeans=True)
        ax.set_xticks(range(1, len(labels) + 1))
        ax.set_xticklabels(labels)
        ax.set_ylabel("latency (us)")
        ax.set_title(FIGURE_TITLES.get(figure, figure))
        ax.grid(axis="y", linestyle=":", linewidth=0.5)
        fig.tight_layout()
        path = Path(path)
        fig.savefig(path, format="svg", metadata={"Date": None})
    finally:
        plt.close(fig)
    logger.debug(f"box plot {figure} -> {path}")
    return path


def write_box_plots(grouped: Mapping[str, Mapping[str, Sequence[TimeNs]]], out_dir: Union[str, Path]) -> Dict[str, Path]:
    """One SVG per figure; figures without data are skipped"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {}
    for figure, groups in grouped.items():
        groups = {label: values for label, values in groups.items() if values}
        if not groups:
            logger.warning(f"no data for {figure}; plot skipped")
            continue
        written[figure] = box_plot(figure, groups, out_dir / f"{figure}.svg")
    return written
