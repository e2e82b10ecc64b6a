"""SVG charts for stability sweeps.

Figures are rendered with the Agg backend and a fixed SVG hash salt, and the
date metadata is dropped, so identical reports give byte-identical files.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .stability import StabilityReport  # noqa: E402

_STYLE = {"svg.hashsalt": "stgnn-lab", "svg.fonttype": "none", "font.size": 9, "axes.grid": True,
          "grid.alpha": 0.3}


def sweep_figure(report: StabilityReport, n: int, path: str | Path, quantity: str = "measured",
                 title: str | None = None) -> Path:
    """Mean +/- std of ``quantity`` against ``1 - p`` for size ``n`` with the bound on a twin axis.

    ``quantity`` is ``"measured"`` (output deviation) or ``"relative_cost"``.
    """
    rows = sorted((r for r in report.summary if r.n == n), key=lambda r: 1.0 - r.p)
    if not rows:
        raise ValueError(f"report has no rows for N={n}")
    drop = np.array([1.0 - r.p for r in rows])
    if quantity == "measured":
        mean, std, label = np.array([r.mean for r in rows]), np.array([r.std for r in rows]), "output deviation"
    elif quantity == "relative_cost":
        mean = np.array([r.cost_mean for r in rows])
        std = np.array([r.cost_std for r in rows])
        label = "relative cost"
    else:
        raise ValueError(f"unknown quantity {quantity!r}")
    bound = np.array([r.bound for r in rows])

    path = Path(path)
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        ax.errorbar(drop, mean, yerr=std, marker="o", ms=3, capsize=2, color="C0", label=label)
        ax.set_xlabel("edge-drop probability 1 - p")
        ax.set_ylabel(label, color="C0")
        twin = ax.twinx()
        twin.plot(drop, bound, ls="--", color="C3", label="first-order bound")
        twin.set_ylabel("bound", color="C3")
        twin.grid(False)
        ax.set_title(title or f"N = {n}")
        handles = ax.get_legend_handles_labels()[0] + twin.get_legend_handles_labels()[0]
        ax.legend(handles, [h.get_label() for h in handles], loc="upper left", frameon=False)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return path
