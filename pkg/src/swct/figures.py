"""Matplotlib figure rendering for report outputs (box plot, motion trace).

Figures are written straight to files with the Agg backend; the delimited
exports remain the canonical machine outputs.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .volcore import REGION_NAMES


def render_boxplot(rows, path, title: str = "Dice by region") -> Path:
    """Render precomputed BoxStats rows as a box plot with the 0.7 guideline."""
    rows = list(rows)
    if not rows:
        raise ValueError("no box-plot rows to render")
    stats = []
    for s in rows:
        non_outlier = [v for v in (s.vmin, s.vmax) if v not in s.outliers]
        body = [v for v in (s.vmin, s.q1, s.median, s.q3, s.vmax)
                if v not in s.outliers]
        stats.append({
            "label": REGION_NAMES.get(s.region, str(s.region)),
            "med": s.median, "q1": s.q1, "q3": s.q3,
            "whislo": min(body) if body else s.q1,
            "whishi": max(body) if body else s.q3,
            "fliers": list(s.outliers),
        })
    guideline = rows[0].guideline
    fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(rows), 4.0), dpi=100)
    ax.bxp(stats, showfliers=True)
    ax.axhline(guideline, color="tab:red", linestyle="--", linewidth=1,
               label=f"guideline {guideline:g}")
    ax.set_ylabel("Dice coefficient")
    ax.set_ylim(-0.02, 1.02)
    ax.set_title(title)
    ax.legend(loc="lower right")
    ax.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def render_trace(trace, path) -> Path:
    """Plot a motion trace: centroid height over time plus asymmetry if present."""
    n = len(trace.centroid_mm)
    t = [i * trace.frame_interval_s for i in range(n)]
    z = [c[2] if c is not None else float("nan") for c in trace.centroid_mm]
    fig, ax = plt.subplots(figsize=(6.0, 3.5), dpi=100)
    name = REGION_NAMES.get(trace.region, str(trace.region))
    ax.plot(t, z, marker="o", markersize=3, label=f"{name} centroid z")
    ax.set_xlabel("time (s)")
    ax.set_ylabel("z (mm)")
    if any(v is not None for v in trace.asymmetry_mm):
        ax2 = ax.twinx()
        a = [v if v is not None else float("nan") for v in trace.asymmetry_mm]
        ax2.plot(t, a, color="tab:orange", linestyle="--", marker=".",
                 label="horn asymmetry")
        ax2.set_ylabel("asymmetry (mm)")
        ax2.legend(loc="upper right")
    ax.legend(loc="upper left")
    ax.set_title(f"{name} motion")
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path
