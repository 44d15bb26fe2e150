"""Report figures rendered to PNG files.

Sampling checks get a running-mean plot of the paired difference with a
three-sigma band and a histogram; the composition check gets the per-node
distance curves of both grids; geometry checks get a residual bar
chart.  File names are deterministic: {scenario}_{check}_{kind}.png.
"""
from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _running_stats(d: np.ndarray):
    n = np.arange(1, d.size + 1, dtype=float)
    cm = np.cumsum(d) / n
    cs = np.cumsum(d * d)
    var = np.maximum(cs / n - cm * cm, 0.0) * n / np.maximum(n - 1.0, 1.0)
    se = np.sqrt(var / n)
    return cm, se


def _save(fig, outdir: str, name: str, written: list):
    path = os.path.join(outdir, name)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    written.append(path)


def render_figures(report: dict, data: dict, outdir: str) -> list:
    os.makedirs(outdir, exist_ok=True)
    base = f"{report['scenario']}_{report['check']}"
    written: list = []
    if "lhs" in data:
        d = np.asarray(data["lhs"], dtype=float) \
            - np.asarray(data["rhs"], dtype=float)
        cm, se = _running_stats(d)
        idx = np.unique(np.linspace(8, d.size, 400).astype(int)) - 1
        fig, ax = plt.subplots(figsize=(6.0, 3.6))
        ax.axhline(0.0, color="k", lw=0.8)
        ax.plot(idx + 1, cm[idx], lw=1.2, label="paired running mean")
        ax.fill_between(idx + 1, cm[idx] - 3 * se[idx],
                        cm[idx] + 3 * se[idx], alpha=0.25,
                        label="3 stderr band")
        ax.set_xlabel("samples")
        ax.set_ylabel("lhs - rhs")
        ax.set_title(f"{base}: paired convergence")
        ax.legend(loc="best", fontsize=8)
        fig.tight_layout()
        _save(fig, outdir, f"{base}_paired.png", written)

        fig, ax = plt.subplots(figsize=(6.0, 3.6))
        ax.hist(d, bins=80, color="tab:blue", alpha=0.8)
        ax.set_xlabel("per-sample lhs - rhs")
        ax.set_ylabel("count")
        ax.set_title(f"{base}: paired differences")
        fig.tight_layout()
        _save(fig, outdir, f"{base}_hist.png", written)
    elif "coarse" in data:
        fig, ax = plt.subplots(figsize=(6.0, 3.6))
        for name in ("coarse", "fine"):
            y = np.asarray(data[name], dtype=float)
            t = np.linspace(0.0, 1.0, y.size)
            ax.semilogy(t, np.maximum(y, 1e-18), lw=1.2, label=name)
        ax.set_xlabel("time fraction")
        ax.set_ylabel("distance")
        ax.set_title(f"{base}: grid refinement")
        ax.legend(loc="best", fontsize=8)
        fig.tight_layout()
        _save(fig, outdir, f"{base}_grids.png", written)
    elif "residuals" in data:
        names = sorted(data["residuals"])
        vals = [max(float(data["residuals"][k]), 1e-18) for k in names]
        fig, ax = plt.subplots(figsize=(6.0, 3.6))
        ax.bar(range(len(names)), vals, color="tab:orange", alpha=0.85)
        ax.axhline(report["threshold"], color="r", lw=1.0, ls="--",
                   label="threshold")
        ax.set_yscale("log")
        ax.set_xticks(range(len(names)), names, rotation=20, fontsize=8)
        ax.set_ylabel("residual")
        ax.set_title(f"{base}: residuals")
        ax.legend(loc="best", fontsize=8)
        fig.tight_layout()
        _save(fig, outdir, f"{base}_residuals.png", written)
    return written
