"""Report figures: loss curves, module-selection histograms, module
proportion pies, and colored caption traces. Everything renders to files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

MODULE_NAMES = ("Locate", "Relate", "Func")
MODULE_COLORS = {"Locate": "#1f5fbf", "Relate": "#c8312b", "Func": "#2e8b3a"}

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def _save(fig, path):
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_training_curves(history, path, title=None):
    """Caption and linguistic loss per epoch, with validation CIDEr on a second axis."""
    epochs = [r["epoch"] for r in history]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        ax.plot(epochs, [r["loss_cap"] for r in history], "-o", ms=3, label="caption loss")
        ax.plot(epochs, [r["loss_pos"] for r in history], "-s", ms=3, label="linguistic loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss per caption")
        ax2 = ax.twinx()
        ax2.spines["right"].set_visible(True)
        ax2.plot(epochs, [r["val"]["cider"] for r in history], "--", color="0.35", label="val CIDEr")
        ax2.set_ylabel("CIDEr")
        lines = ax.get_lines() + ax2.get_lines()
        ax.legend(lines, [ln.get_label() for ln in lines], loc="center right", frameon=False)
        if title:
            ax.set_title(title)
        return _save(fig, path)


def plot_selection_histogram(history, path, title=None):
    """Stacked per-epoch share of each module among training decisions."""
    epochs = np.array([r["epoch"] for r in history])
    counts = np.array([[r["selection_histogram"][m] for m in MODULE_NAMES] for r in history], dtype=float)
    share = counts / np.maximum(counts.sum(axis=1, keepdims=True), 1)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 2.8))
        bottom = np.zeros(len(epochs))
        for k, m in enumerate(MODULE_NAMES):
            ax.bar(epochs, share[:, k], bottom=bottom, color=MODULE_COLORS[m], width=0.85, label=m)
            bottom += share[:, k]
        ax.set_xlabel("epoch")
        ax.set_ylabel("share of selections")
        ax.set_ylim(0, 1)
        ax.legend(ncol=3, loc="upper center", bbox_to_anchor=(0.5, 1.18), frameon=False)
        if title:
            ax.set_title(title, pad=28)
        return _save(fig, path)


def plot_module_proportions(proportions: dict, path):
    """One pie per setting (e.g. H, H+L, ground truth) of module usage."""
    names = list(proportions)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(names), figsize=(2.2 * len(names), 2.4))
        axes = np.atleast_1d(axes)
        for ax, name in zip(axes, names):
            vals = np.asarray(proportions[name], dtype=float)
            ax.pie(vals, colors=[MODULE_COLORS[m] for m in MODULE_NAMES],
                   autopct=lambda p: f"{p:.0f}%" if p > 0 else "", startangle=90,
                   textprops={"color": "white", "fontsize": 7})
            ax.set_title(name)
        fig.legend(MODULE_NAMES, loc="lower center", ncol=3, frameon=False)
        return _save(fig, path)


def plot_trace(records, path, title=None):
    """Caption words colored by generating module, with the three normalized scores below."""
    n = len(records)
    with plt.rc_context(STYLE):
        fig, (ax_w, ax_s) = plt.subplots(2, 1, figsize=(max(3.0, 0.9 * n + 1), 2.8),
                                         gridspec_kw={"height_ratios": [1, 2]})
        ax_w.axis("off")
        for i, r in enumerate(records):
            ax_w.text(i + 0.5, 0.5, r["word"], color=MODULE_COLORS[r["module"]],
                      ha="center", va="center", fontsize=11, fontweight="bold")
        ax_w.set_xlim(0, max(n, 1))
        x = np.arange(n) + 0.5
        width = 0.25
        for k, m in enumerate(MODULE_NAMES):
            ax_s.bar(x + (k - 1) * width, [r[f"score_{m.lower()}"] for r in records], width,
                     color=MODULE_COLORS[m], label=m)
        ax_s.set_xlim(0, max(n, 1))
        ax_s.set_xticks(x)
        ax_s.set_xticklabels([r["word"] for r in records])
        ax_s.set_ylim(0, 1)
        ax_s.set_ylabel("normalized score")
        ax_s.legend(ncol=3, frameon=False, loc="upper center", bbox_to_anchor=(0.5, 1.25))
        if title:
            ax_w.set_title(title)
        return _save(fig, path)
