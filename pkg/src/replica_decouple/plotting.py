"""Report figures (matplotlib, file output only)."""
from __future__ import annotations

import math
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _grid(count):
    cols = min(3, count)
    rows = math.ceil(count / cols)
    fig, axes = plt.subplots(rows, cols, figsize=(4 * cols, 3 * rows), squeeze=False)
    for ax in axes.flat[count:]:
        ax.set_visible(False)
    return fig, axes.flat


def plot_cdf_curves(rows, path, title=None):
    """rows: (group, t, empirical, predicted)."""
    by = defaultdict(list)
    for g, t, e, p in rows:
        by[g].append((t, e, p))
    if not by:
        return None
    fig, axes = _grid(len(by))
    for ax, (g, pts) in zip(axes, by.items()):
        t, e, p = zip(*pts)
        ax.step(t, e, where="post", lw=1.2, label="Monte Carlo")
        ax.plot(t, p, "--", lw=1.2, label="predicted")
        ax.set_title(g, fontsize=9)
        ax.set_ylim(-0.02, 1.02)
    axes[0].legend(fontsize=8, loc="upper left")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_moments(moments, path):
    """Empirical joint moments with confidence intervals against predictions."""
    labels = [f"{m['k']},{m['l']}" for m in moments]
    est = [m["estimate"] for m in moments]
    err = [[m["estimate"] - m["ci"][0] for m in moments], [m["ci"][1] - m["estimate"] for m in moments]]
    pred = [m["predicted"] for m in moments]
    fig, ax = plt.subplots(figsize=(max(5, 0.45 * len(moments)), 3.2))
    x = range(len(moments))
    ax.errorbar(x, est, yerr=err, fmt="o", ms=3, capsize=2, label="Monte Carlo (95% CI)")
    ax.plot(x, pred, "x", color="C3", label="predicted")
    ax.set_xticks(list(x))
    ax.set_xticklabels(labels, rotation=90, fontsize=7)
    ax.set_xlabel("(k, l)")
    ax.set_ylabel("E xhat^k x^l")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_predicted_cdfs(curves, path, title=None):
    """curves: {label: (t, cdf)} for one channel."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, (t, c) in curves.items():
        ax.plot(t, c, lw=1.2, label=label)
    ax.set_xlabel("xhat")
    ax.set_ylabel("P(xhat <= t | x)")
    ax.legend(fontsize=7)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_sweep(param, values, series, path):
    """series: {name: list of y values aligned with ``values``}."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, ys in series.items():
        ax.plot(values, [math.nan if y is None else y for y in ys], "o-", ms=3, label=name)
    ax.set_xlabel(param)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
