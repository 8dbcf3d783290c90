"""SVG figures: RMSE-vs-horizon curves and inferred hypergraph overlays."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed ids and no timestamp so repeated runs produce identical files
STYLE = {
    "svg.hashsalt": "hypermotion",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.figsize": (5.0, 3.2),
}
SVG_META = {"Date": None, "Creator": None}
FRAME_SECONDS = 0.1


def series_gid(name: str) -> str:
    return f"series-{name}"


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, format="svg", metadata=SVG_META)
    plt.close(fig)
    return path


def plot_error_curves(reports: Sequence, path) -> Path:
    """One polyline per variant; each line carries the SVG id ``series-<variant>``."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for r in reports:
            hs = r.horizons
            if not hs:
                continue
            secs = np.asarray(hs) * FRAME_SECONDS
            ax.plot(secs, [r.values[h] for h in hs], marker="o", ms=3, label=r.variant,
                    gid=series_gid(r.variant))
        ax.set_xlabel("prediction horizon (s)")
        ax.set_ylabel("RMSE (m)")
        if any(r.horizons for r in reports):
            ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def plot_hypergraph(positions: np.ndarray, incidences: Sequence[np.ndarray], scales: Sequence[int],
                    path, labels: Sequence[str] | None = None) -> Path:
    """Agents at their last observed positions with one panel per scale.

    Each hyperedge is drawn as a closed outline through its members,
    ordered by angle around their centroid.
    """
    pos = np.asarray(positions, dtype=float)
    n_panels = max(1, len(incidences))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, n_panels, figsize=(3.2 * n_panels, 3.0), squeeze=False)
        for ax, inc, size in zip(axes[0], incidences, scales):
            ax.scatter(pos[:, 0], pos[:, 1], s=14, c="k", zorder=3)
            if labels is not None:
                for (x, y), lab in zip(pos, labels):
                    ax.annotate(lab, (x, y), fontsize=7, xytext=(3, 3), textcoords="offset points")
            for e in range(inc.shape[1]):
                pts = pos[inc[:, e] > 0]
                c = pts.mean(axis=0)
                order = np.argsort(np.arctan2(pts[:, 1] - c[1], pts[:, 0] - c[0]))
                loop = np.vstack([pts[order], pts[order][:1]])
                ax.plot(loop[:, 0], loop[:, 1], lw=1.0, alpha=0.6)
            ax.set_title(f"group size {size}")
            ax.set_xlabel("x (m)")
            ax.set_ylabel("y (m)")
        fig.tight_layout()
        return _save(fig, path)
