"""Figures rendered from the CSV tables of an output directory."""

import os

import numpy as np

from .tables import read_csv


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def _numeric(rows, key):
    return np.array([r[key] if isinstance(r.get(key), float) else np.nan for r in rows])


def plot_convergence(rows, path):
    plt = _pyplot()
    data = [r for r in rows if isinstance(r.get("h"), float)]
    h = _numeric(data, "h")
    fig, ax = plt.subplots(figsize=(5, 4))
    for key in ("e_l2", "e_hcurl", "e_hdiv", "e_l2_p"):
        if key in data[0]:
            ax.loglog(h, _numeric(data, key), "o-", label=key)
    ax.set_xlabel("h")
    ax.set_ylabel("error")
    ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_history(rows, path):
    plt = _pyplot()
    keys = [k for k in rows[0] if k.startswith(("e_", "eps_"))]
    fig, axes = plt.subplots(1, len(keys), figsize=(4 * len(keys), 3.5), squeeze=False)
    seeds = sorted({r["seed"] for r in rows}, key=str)
    for ax, key in zip(axes[0], keys):
        for s in seeds:
            sel = [r for r in rows if r["seed"] == s]
            ax.semilogy(_numeric(sel, "iter"), _numeric(sel, key), lw=1, label=f"seed {s:g}"
                        if isinstance(s, float) else str(s))
        ax.set_title(key)
        ax.set_xlabel("iteration")
    axes[0][0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_summary_box(rows, path):
    plt = _pyplot()
    seeds = [r for r in rows if isinstance(r.get("seed"), float)]
    keys = [k for k in rows[0] if k.startswith(("e_", "eps_"))]
    data = [_numeric(seeds, k) for k in keys]
    data = [d[np.isfinite(d)] for d in data]
    fig, ax = plt.subplots(figsize=(1.3 * len(keys) + 2, 4))
    ax.boxplot(data)
    ax.set_xticks(range(1, len(keys) + 1))
    ax.set_xticklabels(keys, rotation=45, ha="right", fontsize=8)
    ax.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_indicators(rows, path):
    plt = _pyplot()
    level = max(r["level"] for r in rows)
    sel = [r for r in rows if r["level"] == level]
    x, y = _numeric(sel, "x"), _numeric(sel, "y")
    kinds = ("real", "integration", "network")
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.8))
    for ax, k in zip(axes, kinds):
        sc = ax.scatter(x, y, c=np.log10(np.maximum(_numeric(sel, k), 1e-300)), s=8,
                        marker="s", cmap="viridis")
        mk = _numeric(sel, "marked_" + k) > 0
        ax.scatter(x[mk], y[mk], s=10, facecolors="none", edgecolors="r", linewidths=0.5)
        ax.set_title(f"{k} (log10)")
        ax.set_aspect("equal")
        fig.colorbar(sc, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


_FIGURES = (("convergence.csv", "convergence.png", plot_convergence),
            ("history.csv", "history.png", plot_history),
            ("summary.csv", "summary.png", plot_summary_box),
            ("indicators.csv", "indicators.png", plot_indicators))


def render_report(out_dir):
    """Render a PNG next to every known CSV in ``out_dir``; returns the written paths."""
    written = []
    for csv_name, png, fn in _FIGURES:
        src = os.path.join(out_dir, csv_name)
        if not os.path.exists(src):
            continue
        rows = read_csv(src)
        if rows:
            written.append(fn(rows, os.path.join(out_dir, png)))
    return written
