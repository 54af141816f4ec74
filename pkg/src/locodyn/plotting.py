"""Figure export (SVG and PNG) for curves, training histories and experiment tables.

Figures are rendered with the Agg backend and written with fixed metadata
and a fixed SVG id salt, so identical data produce identical files.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

FORMATS = ("svg", "png")
_STYLE = {
    "svg.hashsalt": "locodyn",
    "font.size": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.2,
}


def _save(fig, stem, formats=FORMATS):
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    paths = []
    for ext in formats:
        path = stem.with_suffix("." + ext)
        meta = {"Date": None, "Creator": None} if ext == "svg" else {"Software": None}
        fig.savefig(path, format=ext, metadata=meta, dpi=120)
        paths.append(path)
    plt.close(fig)
    return paths


def plot_curves(summary, channels, stem, ylabel="N/kg", ncols=3, formats=FORMATS):
    """Mean curves with one-standard-deviation bands, truth against prediction.

    Parameters
    ----------
    summary : ndarray, shape (points, channels, 4)
        Output of ``metrics.curve_summary``.
    channels : sequence of str
    stem : path without suffix
    """
    summary = np.asarray(summary)
    n = len(channels)
    rows = int(np.ceil(n / ncols))
    t = np.linspace(0, 100, summary.shape[0])
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(rows, ncols, figsize=(2.6 * ncols, 1.8 * rows), squeeze=False, sharex=True)
        for c, ax in enumerate(axes.flat):
            if c >= n:
                ax.set_visible(False)
                continue
            tm, ts, pm, ps = summary[:, c].T
            ax.fill_between(t, tm - ts, tm + ts, color="0.85", lw=0)
            ax.plot(t, tm, color="0.3", label="truth")
            ax.plot(t, pm, color="C0", label="prediction")
            ax.plot(t, pm - ps, color="C0", ls="--", lw=0.7)
            ax.plot(t, pm + ps, color="C0", ls="--", lw=0.7)
            ax.set_title(channels[c])
            if c % ncols == 0:
                ax.set_ylabel(ylabel)
        for ax in axes[-1]:
            ax.set_xlabel("% of sequence")
        axes.flat[0].legend(frameon=False)
        fig.tight_layout()
        return _save(fig, stem, formats)


def plot_history(history, stem, formats=FORMATS):
    """Per-epoch raw loss averages on a log scale."""
    keys = sorted({k for rec in history for k in rec if k.startswith(("loss_", "val_"))})
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        for k in keys:
            ep = [r["epoch"] for r in history if k in r and np.isfinite(r[k]) and r[k] > 0]
            val = [r[k] for r in history if k in r and np.isfinite(r[k]) and r[k] > 0]
            if val:
                ax.plot(ep, val, label=k, ls="--" if k.startswith("val_") else "-")
        ax.set_yscale("log")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend(frameon=False, fontsize=6)
        fig.tight_layout()
        return _save(fig, stem, formats)


def plot_table(rows, x, y, group, stem, xlabel=None, ylabel=None, logx=False, formats=FORMATS):
    """Line chart of ``y`` over ``x`` with one line per value of ``group``.

    Rows holding several seeds or splits are averaged; the band spans the
    smallest and largest value.
    """
    series = {}
    for r in rows:
        series.setdefault(r[group], {}).setdefault(float(r[x]), []).append(float(r[y]))
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        for k, (name, pts) in enumerate(sorted(series.items(), key=lambda kv: str(kv[0]))):
            xs = np.array(sorted(pts))
            vals = [np.array(pts[v]) for v in xs]
            mean = np.array([v.mean() for v in vals])
            ax.plot(xs, mean, marker="o", ms=3, color=f"C{k}", label=str(name))
            ax.fill_between(xs, [v.min() for v in vals], [v.max() for v in vals], color=f"C{k}", alpha=0.15, lw=0)
        if logx:
            ax.set_xscale("log")
        ax.set_xlabel(xlabel or x)
        ax.set_ylabel(ylabel or y)
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, stem, formats)
