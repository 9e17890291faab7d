"""Figures for merged sweep reports: speedup curves, runtime and energy breakdowns.

Rows are the dicts produced by the ``report`` command (string values straight
from CSV); every function writes one PNG and returns its path.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

TIME_PARTS = ("compute", "c2c", "l3", "l2", "idle")
ENERGY_PARTS = ("compute", "c2c", "l3_l2", "l2_l1")
MARKERS = ("o", "s", "^", "D", "v", "x")
COLORS = {
    "compute": "#4c72b0",
    "c2c": "#dd8452",
    "l3": "#c44e52",
    "l2": "#8172b3",
    "idle": "#cccccc",
    "l3_l2": "#c44e52",
    "l2_l1": "#8172b3",
}

plt.rcParams.update({"font.size": 9, "axes.spines.top": False, "axes.spines.right": False})


def group_series(rows: list[dict]) -> dict[str, list[dict]]:
    """Successful rows grouped by series label, each sorted by chip count."""
    out: dict[str, list[dict]] = {}
    for r in rows:
        if r.get("status", "ok") != "ok":
            continue
        out.setdefault(r["series"], []).append(r)
    for rs in out.values():
        rs.sort(key=lambda r: int(r["n_chips"]))
    return out


def _col(rs, key, scale=1.0):
    return np.array([float(r[key]) * scale for r in rs])


def plot_speedup(rows: list[dict], path: str | Path) -> Path:
    series = group_series(rows)
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    top = 1
    for label, rs in series.items():
        n = _col(rs, "n_chips")
        ax.plot(n, _col(rs, "speedup"), marker=MARKERS[len(ax.lines) % len(MARKERS)], ms=4, label=label)
        top = max(top, n.max())
    ax.plot([1, top], [1, top], ls="--", lw=0.8, color="0.5", label="linear")
    ax.set_xscale("log", base=2)
    ax.set_yscale("log", base=2)
    ax.set_xlabel("chips")
    ax.set_ylabel("speedup vs. 1 chip")
    ax.legend(frameon=False, fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return Path(path)


def _stacked(rows, path, parts, prefix, scale, ylabel):
    series = group_series(rows)
    if not series:
        raise ValueError("no successful rows to plot")
    fig, axes = plt.subplots(1, len(series), figsize=(3.2 * len(series), 3.0), squeeze=False)
    for ax, (label, rs) in zip(axes[0], series.items()):
        x = np.arange(len(rs))
        bottom = np.zeros(len(rs))
        for part in parts:
            h = _col(rs, prefix + part, scale)
            ax.bar(x, h, bottom=bottom, color=COLORS[part], label=part, width=0.7)
            bottom += h
        ax.set_xticks(x, [r["n_chips"] for r in rs])
        ax.set_xlabel("chips")
        ax.set_title(label, fontsize=8)
    axes[0][0].set_ylabel(ylabel)
    axes[0][-1].legend(frameon=False, fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return Path(path)


def plot_breakdown(rows: list[dict], path: str | Path) -> Path:
    return _stacked(rows, path, TIME_PARTS, "t_", 1e3, "block runtime [ms]")


def plot_energy(rows: list[dict], path: str | Path) -> Path:
    return _stacked(rows, path, ENERGY_PARTS, "e_", 1e6, "block energy [uJ]")


def render_all(rows: list[dict], stem: str | Path) -> list[Path]:
    stem = Path(stem)
    base = stem.with_suffix("")
    return [
        plot_speedup(rows, f"{base}_speedup.png"),
        plot_breakdown(rows, f"{base}_runtime.png"),
        plot_energy(rows, f"{base}_energy.png"),
    ]
