"""Render sweep results to figure files: contour lines of the measured
optimality gap against its bound, surface plots of both fields, and a
per-point comparison. Written for headless batch use."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .deviation import DeviationReport

__all__ = ["render_sweep_figures"]


def _grid_fields(reports: list[DeviationReport]):
    pts = int(round(math.sqrt(len(reports))))
    if pts * pts != len(reports):
        raise ValueError("sweep is not a square grid")
    x1 = np.array([r.x0[0] for r in reports]).reshape(pts, pts)
    x2 = np.array([r.x0[1] for r in reports]).reshape(pts, pts)
    gap = np.array([np.nan if r.value_gap is None else r.value_gap
                    for r in reports]).reshape(pts, pts)
    bound = np.array([r.delta_v_max for r in reports]).reshape(pts, pts)
    return x1, x2, gap, bound


def render_sweep_figures(reports: list[DeviationReport], out_dir) -> list[str]:
    """Write deviation_contours.png, deviation_surfaces.png, and
    bound_comparison.png next to the sweep CSV; returns the paths."""
    from pathlib import Path

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    x1, x2, gap, bound = _grid_fields(reports)
    paths = []

    fig, ax = plt.subplots(figsize=(6.0, 5.0))
    cs_gap = ax.contour(x1, x2, gap, levels=8, colors="tab:blue")
    ax.clabel(cs_gap, inline=True, fontsize=7, fmt="%.3f")
    cs_bound = ax.contour(x1, x2, bound, levels=8, colors="tab:red",
                          linestyles="--")
    ax.clabel(cs_bound, inline=True, fontsize=7, fmt="%.2f")
    ax.plot([], [], color="tab:blue", label="optimality gap $V^*-V_0^*$")
    ax.plot([], [], color="tab:red", linestyle="--",
            label=r"bound $\Delta V_{\max}$")
    ax.set_xlabel("$x_1$")
    ax.set_ylabel("$x_2$")
    ax.set_title("Optimality gap and its deviation bound")
    ax.legend(loc="upper center", fontsize=8)
    fig.tight_layout()
    p = out_dir / "deviation_contours.png"
    fig.savefig(p, dpi=150)
    plt.close(fig)
    paths.append(str(p))

    fig = plt.figure(figsize=(9.0, 4.2))
    for i, (field, title) in enumerate(
            [(gap, "gap $V^*-V_0^*$"), (bound, r"bound $\Delta V_{\max}$")]):
        ax = fig.add_subplot(1, 2, i + 1, projection="3d")
        ax.plot_surface(x1, x2, field, cmap="viridis", linewidth=0)
        ax.set_xlabel("$x_1$")
        ax.set_ylabel("$x_2$")
        ax.set_title(title, fontsize=10)
    fig.tight_layout()
    p = out_dir / "deviation_surfaces.png"
    fig.savefig(p, dpi=150)
    plt.close(fig)
    paths.append(str(p))

    fig, ax = plt.subplots(figsize=(5.2, 5.0))
    flat_gap = gap.ravel()
    flat_bound = bound.ravel()
    ax.scatter(flat_bound, flat_gap, s=10, alpha=0.6, label="grid points")
    lim = max(1e-3, np.nanmax(flat_bound)) * 1.05
    ax.plot([0, lim], [0, lim], "k--", linewidth=1, label="gap = bound")
    ax.set_xlim(0, lim)
    ax.set_xlabel(r"$\Delta V_{\max}$")
    ax.set_ylabel("$V^* - V_0^*$")
    ax.set_title("Per-point gap versus bound")
    ax.legend(fontsize=8)
    fig.tight_layout()
    p = out_dir / "bound_comparison.png"
    fig.savefig(p, dpi=150)
    plt.close(fig)
    paths.append(str(p))
    return paths
