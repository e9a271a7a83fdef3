"""PNG figures written next to the CSV/JSON metric files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.frameon": False,
}


def figure_path(out) -> Path:
    """``metrics.csv`` -> ``metrics.png``."""
    return Path(out).with_suffix(".png")


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_lookback(rows, path, label: str = "model") -> Path:
    """AUROC and AUPR against hours before the anchor."""
    h = [r["horizon_hours"] for r in rows]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(7.0, 2.8), sharex=True)
        for ax, key, name in zip(axes, ("auroc", "aupr"), ("AUROC", "AUPR")):
            ax.plot(h, [r[key] for r in rows], marker="o", ms=3, label=label)
            ax.set_xlabel("hours before onset")
            ax.set_ylabel(name)
            ax.set_ylim(0, 1.02)
            ax.invert_xaxis()
        axes[0].legend(loc="lower left")
        return _save(fig, path)


def plot_realtime(curve, path, label: str = "model") -> Path:
    """False alarms per true alarm and precision along the sensitivity axis.

    Early alarms on cases count as false, so sensitivity need not move
    monotonically with the threshold; points are drawn unconnected.
    """
    pts = [c for c in curve if c["sensitivity"] is not None and c["fa_per_ta"] is not None]
    sens = [c["sensitivity"] for c in pts]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(7.0, 2.8), sharex=True)
        axes[0].plot(sens, [c["fa_per_ta"] for c in pts], ".", ms=3, label=label)
        axes[0].axvline(0.8, color="0.5", lw=0.8, ls="--")
        axes[0].set_ylabel("false alarms per true alarm")
        axes[1].plot(sens, [c["precision"] for c in pts], ".", ms=3, label=label)
        axes[1].set_ylabel("precision")
        axes[1].set_ylim(0, 1.02)
        for ax in axes:
            ax.set_xlabel("sensitivity")
            ax.set_xlim(0, 1.0)
        axes[0].legend(loc="upper left")
        return _save(fig, path)
