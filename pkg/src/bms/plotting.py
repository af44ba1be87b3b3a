"""Figure rendering for CLI reports. Always uses the non-interactive Agg backend."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.4),
    "figure.dpi": 100,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.frameon": False,
}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    # no software/date stamps so reruns produce identical bytes
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def line_plot(series: dict[str, tuple[Sequence[float], Sequence[float]]], path: str | Path, xlabel: str = "",
              ylabel: str = "", title: str = "", marker: str = "o") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name, (x, y) in series.items():
            ax.plot(x, y, marker=marker, markersize=3, linewidth=1.2, label=name)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        if len(series) > 1:
            ax.legend()
        return _save(fig, path)


def loss_curve(losses: Sequence[float], path: str | Path, title: str = "") -> Path:
    return line_plot({"loss": (list(range(len(losses))), list(losses))}, path, "epoch", "loss", title, marker="")


def expressive_power(rows: Sequence[tuple[int, str, float]], path: str | Path) -> Path:
    series: dict[str, tuple[list, list]] = {}
    for n, mode, value in rows:
        xs, ys = series.setdefault(mode, ([], []))
        xs.append(n)
        ys.append(value)
    return line_plot(series, path, "behavioral dimension n", "log2 expressive power")


def entropy_curve(checkpoints: Sequence[int], means: Sequence[float], path: str | Path) -> Path:
    return line_plot({"entropy": (list(checkpoints), list(means))}, path, "events per user", "mean entropy (bits)")


def harness(rows: Sequence, path: str | Path) -> Path:
    """AUC and prevented loss against the hide fraction, one panel each."""
    with plt.rc_context({**STYLE, "figure.figsize": (8.0, 3.2)}):
        fig, (left, right) = plt.subplots(1, 2)
        modes = sorted({r.mode for r in rows})
        for mode in modes:
            sel = [r for r in rows if r.mode == mode]
            h = [r.hide for r in sel]
            left.errorbar(h, [r.auc_mean for r in sel], yerr=[r.auc_std for r in sel], marker="o", markersize=3,
                          capsize=2, label=mode)
            right.errorbar(h, [r.prevented_mean for r in sel], yerr=[r.prevented_std for r in sel], marker="o",
                           markersize=3, capsize=2, label=mode)
        left.set_xlabel("hidden fraction h")
        left.set_ylabel("AUC")
        right.set_xlabel("hidden fraction h")
        right.set_ylabel("prevented loss")
        left.legend()
        return _save(fig, path)


def histogram(values: Sequence[float], path: str | Path, xlabel: str, bins: int = 18) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.hist(list(values), bins=bins, color="0.4")
        ax.set_xlabel(xlabel)
        ax.set_ylabel("count")
        return _save(fig, path)
