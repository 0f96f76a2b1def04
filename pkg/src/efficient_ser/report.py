"""Matplotlib figures for bench reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def params_figure(report, path: Path) -> Path:
    names = [r.name for r in report.rows]
    counts = [r.params for r in report.rows]
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.bar(names, counts, color="#4c72b0")
    ax.set_yscale("log")
    ax.set_ylabel("trainable parameters")
    for i, r in enumerate(report.rows):
        ax.annotate(r.cells()[-1], (i, counts[i]), ha="center", va="bottom", fontsize=8)
    ax.tick_params(axis="x", rotation=30)
    return _save(fig, path)


def ccc_figure(report, path: Path) -> Path:
    rows = [r for r in report.rows if r.activation is not None]
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(7, 3.5))
    for offset, task, color in ((-0.2, "activation", "#dd8452"), (0.2, "valence", "#55a868")):
        means = [getattr(r, task)[0] for r in rows]
        stds = [getattr(r, task)[1] for r in rows]
        ax.bar(x + offset, means, 0.4, yerr=stds, capsize=3, label=task, color=color)
    ax.set_xticks(x, [r.name for r in rows], rotation=30)
    ax.set_ylabel("test CCC")
    ax.legend()
    return _save(fig, path)


def time_figure(report, path: Path) -> Path:
    rows = [r for r in report.rows if r.time_s is not None]
    fig, ax = plt.subplots(figsize=(7, 3.5))
    bars = ax.bar([r.name for r in rows], [r.time_s for r in rows], color="#8172b3")
    for bar, r in zip(bars, rows):
        ax.annotate(f"{100 * r.speedup:.0f}%", (bar.get_x() + bar.get_width() / 2, bar.get_height()),
                    ha="center", va="bottom", fontsize=8)
    ax.set_ylabel(f"training seconds (speedup vs {report.baseline})")
    ax.tick_params(axis="x", rotation=30)
    return _save(fig, path)


def render_figures(report, out_dir: Path | str) -> dict[str, Path]:
    out_dir = Path(out_dir)
    paths = {"params_png": params_figure(report, out_dir / "params.png")}
    if not report.params_only:
        paths["ccc_png"] = ccc_figure(report, out_dir / "ccc.png")
        paths["time_png"] = time_figure(report, out_dir / "time.png")
    return paths
