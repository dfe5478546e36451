"""Figure rendering for run outputs.

Everything draws through the Agg backend straight to files; no display
is ever opened.  Each helper takes already-computed rows or histograms
and returns the path it wrote.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "save_accuracy_vs_epsilon",
    "save_gamma_vs_epsilon",
    "save_gradnorm_hist",
    "save_sweep_curves",
]

plt.rcParams.update({
    "figure.figsize": (6.0, 4.0),
    "figure.dpi": 110,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 10,
})

_COLORS = {"a_w": "#c44e52", "a_b": "#4c72b0", "clean": "#55a868",
            "gamma": "#8172b2"}


def _mean_by_eps(rows, key):
    """Mean of rows[key] per epsilon over seeds; skips missing values."""
    by_eps = {}
    for row in rows:
        v = row.get(key)
        if v is None:
            continue
        by_eps.setdefault(row["epsilon"], []).append(v)
    eps = sorted(by_eps)
    return eps, [float(np.mean(by_eps[e])) for e in eps]


def save_accuracy_vs_epsilon(rows, path):
    """Seed-averaged clean / white-box / black-box accuracy curves."""
    fig, ax = plt.subplots()
    for key, label in (("clean_accuracy", "clean"), ("a_w", "white-box"),
                       ("a_b", "black-box")):
        eps, vals = _mean_by_eps(rows, key)
        if not eps:
            continue
        color = _COLORS["clean" if key == "clean_accuracy" else key]
        ax.plot(eps, vals, "o-", label=label, color=color)
    ax.set_xlabel("epsilon")
    ax.set_ylabel("accuracy")
    ax.set_ylim(-0.02, 1.02)
    strategy = rows[0]["strategy"] if rows else ""
    ax.set_title(f"accuracy vs attack budget ({strategy})")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def save_gamma_vs_epsilon(rows, path):
    """Seed-averaged transferability curve; zero line marked."""
    eps, vals = _mean_by_eps(rows, "gamma")
    if not eps:
        return None
    fig, ax = plt.subplots()
    ax.axhline(0.0, color="black", lw=0.8)
    ax.plot(eps, vals, "s-", color=_COLORS["gamma"])
    ax.set_xlabel("epsilon")
    ax.set_ylabel("gamma (black-box vs white-box)")
    strategy = rows[0]["strategy"] if rows else ""
    ax.set_title(f"transferability gap vs attack budget ({strategy})")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def save_gradnorm_hist(hist, path, min_display_norm=None):
    """Gradient-norm histogram with its cumulative fraction overlaid.

    ``min_display_norm`` trims the x axis (the mass near zero can dwarf
    the tail); counts are not altered.
    """
    centers = 0.5 * (hist.bin_edges[:-1] + hist.bin_edges[1:])
    width = float(hist.bin_edges[1] - hist.bin_edges[0])
    fig, ax = plt.subplots()
    ax.bar(centers, hist.counts_all, width=width * 0.9, color=_COLORS["a_b"],
           label="examples")
    if hist.counts_success.any() or hist.counts_fail.any():
        ax.bar(centers, hist.counts_success, width=width * 0.9,
               color=_COLORS["a_w"], alpha=0.7, label="attack succeeded")
    ax.set_xlabel("input-gradient L2 norm")
    ax.set_ylabel("examples")
    if min_display_norm is not None:
        ax.set_xlim(left=min_display_norm)
    ax2 = ax.twinx()
    ax2.plot(centers, hist.cumulative_fraction, color="black", lw=1.2,
             label="cumulative")
    ax2.set_ylabel("cumulative fraction")
    ax2.set_ylim(0, 1.02)
    ax2.grid(False)
    ax.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def save_sweep_curves(rows, axis, path):
    """Accuracy against the swept value at the largest epsilon of each
    cell, seed-averaged, one curve per metric."""
    largest = {}
    for row in rows:
        key = (row["value"], row["seed"])
        if key not in largest or row["epsilon"] > largest[key]["epsilon"]:
            largest[key] = row
    by_value = {}
    for row in largest.values():
        by_value.setdefault(row["value"], []).append(row)
    values = sorted(by_value)
    fig, ax = plt.subplots()
    for key, label in (("clean_accuracy", "clean"), ("a_w", "white-box"),
                       ("a_b", "black-box")):
        series = []
        for v in values:
            vals = [r[key] for r in by_value[v] if r.get(key) is not None]
            series.append(float(np.mean(vals)) if vals else np.nan)
        if not all(np.isnan(s) for s in series):
            color = _COLORS["clean" if key == "clean_accuracy" else key]
            ax.plot(values, series, "o-", label=label, color=color)
    ax.set_xlabel(axis)
    ax.set_ylabel("accuracy")
    ax.set_ylim(-0.02, 1.02)
    if axis in ("n_A", "n_B"):
        ax.set_xscale("log")
    ax.set_title(f"sweep over {axis} (largest epsilon per cell)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path
