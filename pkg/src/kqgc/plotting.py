"""Report figures written next to the text/TSV outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}
# no Software/date chunks, so reruns produce identical PNGs
_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, metadata=_META)
    plt.close(fig)
    return path


def plot_brand_bars(table: dict[str, dict[str, float]], path) -> Path:
    """Grouped bars of PR-AUC per brand; ``table[feature_set][brand]``."""
    with plt.rc_context(_STYLE):
        names = list(table)
        brands = list(next(iter(table.values())))
        x = np.arange(len(brands))
        width = 0.8 / max(len(names), 1)
        fig, ax = plt.subplots(figsize=(6.4, 3.2))
        for j, name in enumerate(names):
            ax.bar(x + (j - (len(names) - 1) / 2) * width, [table[name][b] for b in brands], width, label=name)
        ax.set_xticks(x)
        ax.set_xticklabels(brands)
        ax.set_ylabel("PR-AUC (test)")
        lo = min(min(v.values()) for v in table.values())
        ax.set_ylim(max(0.0, lo - 0.1), 1.0)
        ax.legend(ncol=min(len(names), 3), frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def plot_pr_curves(curves: dict[str, dict[str, tuple[np.ndarray, np.ndarray]]], path) -> Path:
    """One panel per brand; ``curves[brand][feature_set] = (recall, precision)``."""
    with plt.rc_context(_STYLE):
        brands = list(curves)
        ncol = min(len(brands), 3)
        nrow = -(-len(brands) // ncol)
        fig, axes = plt.subplots(nrow, ncol, figsize=(3.0 * ncol, 2.6 * nrow), squeeze=False)
        for ax, brand in zip(axes.flat, brands):
            for name, (rec, prec) in curves[brand].items():
                ax.step(rec, prec, where="post", label=name, lw=1)
            ax.set_title(f"Brand {brand}")
            ax.set_xlim(0, 1)
            ax.set_ylim(0, 1.02)
            ax.set_xlabel("recall")
            ax.set_ylabel("precision")
        for ax in list(axes.flat)[len(brands):]:
            ax.axis("off")
        axes.flat[0].legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def plot_loss(histories: dict[str, list[float]], path, title: str = "training loss") -> Path:
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(4.8, 3.0))
        for name, losses in histories.items():
            ax.plot(np.arange(1, len(losses) + 1), losses, lw=1, label=name)
        ax.set_xlabel("epoch")
        ax.set_ylabel("summed hinge loss")
        ax.set_title(title)
        if len(histories) > 1:
            ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)
