"""PNG figures written next to the CSV reports.

Everything renders through the non-interactive Agg canvas, so no display is
needed. Each function takes plain arrays or the row dicts already written to
CSV and returns the path it wrote.
"""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

DPI = 120


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    FigureCanvasAgg(fig)
    fig.savefig(path, dpi=DPI, bbox_inches="tight")
    return path


def plot_inclusion_heatmaps(w_layers: Sequence[np.ndarray], genes: Sequence[str],
                            sequences: Sequence[str], path) -> Path:
    """One panel per layer: inclusion probabilities, sequences by genes."""
    tau = len(w_layers)
    g = len(genes)
    fig = Figure(figsize=(max(6.0, 0.32 * g + 2), 1.2 + 1.1 * tau * max(1, len(sequences)) / 2))
    axes = fig.subplots(tau, 1, squeeze=False)[:, 0]
    im = None
    for t, (ax, w) in enumerate(zip(axes, w_layers), start=1):
        im = ax.imshow(np.asarray(w), vmin=0, vmax=1, cmap="viridis", aspect="auto")
        ax.set_yticks(range(len(sequences)), labels=list(sequences))
        ax.set_title(f"layer {t}", fontsize=9, loc="left")
        if t == tau:
            ax.set_xticks(range(g), labels=list(genes), rotation=90, fontsize=7)
        else:
            ax.set_xticks([])
    fig.colorbar(im, ax=list(axes), label="inclusion probability", shrink=0.8)
    return _save(fig, path)


def plot_bic_path(v0_grid, bic, chosen_index: int, path) -> Path:
    v0 = np.asarray(v0_grid, dtype=float)
    bic = np.asarray(bic, dtype=float)
    fig = Figure(figsize=(5.5, 3.5))
    ax = fig.subplots()
    ok = np.isfinite(bic)
    ax.plot(v0[ok], bic[ok], "o-", ms=3, color="0.2")
    if 0 <= chosen_index < len(v0) and ok[chosen_index]:
        ax.axvline(v0[chosen_index], color="tab:red", lw=1, ls="--",
                   label=f"chosen v0 = {v0[chosen_index]:.4g}")
        ax.legend(frameon=False, fontsize=8)
    ax.set_xlabel("spike variance v0")
    ax.set_ylabel("BIC")
    return _save(fig, path)


def plot_tpr_by_layer(rows: Sequence[dict], path, metric: str = "tpr") -> Path:
    """Grouped bars of a per-layer metric, one group per layer, one bar per
    (scenario, level) combination, with +-1 sd whiskers."""
    level_key = "sigma2" if rows and "sigma2" in rows[0] else "theta"
    combos = sorted({(r["scenario"], r[level_key]) for r in rows}, key=lambda c: (c[1], c[0]))
    layers = sorted({int(r["layer"]) for r in rows})
    width = 0.8 / max(1, len(combos))
    fig = Figure(figsize=(1.6 + 1.4 * len(layers) + 0.2 * len(combos), 3.6))
    ax = fig.subplots()
    for i, (sc, lev) in enumerate(combos):
        sub = {int(r["layer"]): r for r in rows if r["scenario"] == sc and r[level_key] == lev}
        x = np.array(layers) + (i - (len(combos) - 1) / 2) * width
        m = [sub[t][f"{metric}_mean"] if t in sub else np.nan for t in layers]
        s = [sub[t][f"{metric}_sd"] if t in sub else np.nan for t in layers]
        ax.bar(x, m, width, yerr=s, capsize=2, label=f"{sc}, {level_key}={lev:g}")
    ax.set_xticks(layers, labels=[f"layer {t}" for t in layers])
    ax.set_ylabel(metric.upper() if metric in ("tpr", "fpr") else metric)
    if metric in ("tpr", "fpr"):
        ax.set_ylim(0, 1.05)
    ax.legend(frameon=False, fontsize=7, ncol=2)
    return _save(fig, path)


def plot_mean_densities(grid_x: Sequence[np.ndarray], densities: Sequence[np.ndarray],
                        labels: Sequence[str], path, title: str = "") -> Path:
    """Overlay of (Karcher) mean densities, one curve per label."""
    fig = Figure(figsize=(5.5, 3.5))
    ax = fig.subplots()
    for x, f, lab in zip(grid_x, densities, labels):
        ax.plot(x, f, lw=1.2, label=lab)
    ax.set_xlabel("intensity")
    ax.set_ylabel("density")
    if title:
        ax.set_title(title, fontsize=9)
    ax.legend(frameon=False, fontsize=7)
    return _save(fig, path)


def plot_bench(rows: Sequence[dict], path) -> Path:
    """EM time and MCMC sweeps completed in that time, per (g, p) pair."""
    labels = [f"g={r['g']}\np={r['p']}" for r in rows]
    x = np.arange(len(rows))
    fig = Figure(figsize=(max(4.5, 1.1 * len(rows) + 1), 3.4))
    ax1, ax2 = fig.subplots(1, 2)
    ax1.bar(x, [r["t_em"] for r in rows], color="0.4")
    ax1.set_ylabel("EM selection time (s)")
    ax2.bar(x, [r["mcmc_sweeps"] for r in rows], color="tab:blue")
    ax2.set_ylabel("MCMC sweeps in the same time")
    for ax in (ax1, ax2):
        ax.set_xticks(x, labels=labels, fontsize=7)
    fig.tight_layout()
    return _save(fig, path)
