"""Mean-curve and ratio-table outputs for `lvc curves`."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .bench import RDCurve, average_curves, common_range, default_grid, relative_sizes  # noqa: E402


def mean_curves(codecs: dict[str, list[RDCurve]], points: int = 20) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Per codec, quality averaged over videos on a bpp grid valid for all its videos."""
    out = {}
    for name, curves in codecs.items():
        grid = default_grid(curves, "bpp", points)
        if grid.size:
            out[name] = average_curves(curves, grid, "bpp")
    return out


def ratio_table(codecs: dict[str, list[RDCurve]], ours: str, points: int = 20) -> dict[str, dict[float, float]]:
    """Relative size of every other codec against ``ours`` at shared quality levels."""
    table = {}
    for name, curves in codecs.items():
        if name == ours:
            continue
        rng = common_range(codecs[ours] + curves, "quality")
        if rng is None:
            continue
        levels = np.linspace(rng[0], rng[1], points)
        table[name] = relative_sizes(codecs[ours], curves, levels)
    return table


def write_mean_curves(path, curves: dict[str, tuple[np.ndarray, np.ndarray]]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["codec", "bpp", "msssim_weighted"])
        for name, (grid, means) in curves.items():
            for g, m in zip(grid, means):
                wr.writerow([name, f"{g:.10g}", f"{m:.10f}"])


def write_ratio_table(path, table: dict[str, dict[float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["codec", "msssim_weighted", "relative_size_percent"])
        for name, rows in table.items():
            for q, ratio in rows.items():
                wr.writerow([name, f"{q:.10f}", f"{ratio:.6f}"])


def plot_mean_curves(path, curves: dict[str, tuple[np.ndarray, np.ndarray]], ours: str | None = None) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.6))
    for name, (grid, means) in curves.items():
        ax.plot(grid, means, marker="o", ms=3, lw=2 if name == ours else 1.2, label=name)
    ax.set_xscale("log")
    ax.set_xlabel("bits per pixel")
    ax.set_ylabel("weighted MS-SSIM")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_ratio_table(path, table: dict[str, dict[float, float]]) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.6))
    for name, rows in table.items():
        q = np.array(list(rows))
        ax.plot(q, list(rows.values()), marker="s", ms=3, label=name)
    ax.axhline(100.0, color="k", lw=0.8, ls="--")
    ax.set_xlabel("weighted MS-SSIM")
    ax.set_ylabel("relative size (%)")
    ax.grid(True, alpha=0.3)
    if table:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def write_report(out_dir, codecs: dict[str, list[RDCurve]], ours: str, points: int = 20) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    curves = mean_curves(codecs, points)
    table = ratio_table(codecs, ours, points)
    paths = [out / "mean_curves.csv", out / "relative_sizes.csv", out / "mean_curves.svg", out / "relative_sizes.svg"]
    write_mean_curves(paths[0], curves)
    write_ratio_table(paths[1], table)
    plot_mean_curves(paths[2], curves, ours)
    plot_ratio_table(paths[3], table)
    return paths
