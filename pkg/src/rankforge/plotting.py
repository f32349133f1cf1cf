"""Figures for training traces, tau sweeps and ablation tables.

Every figure is written next to the CSV it was drawn from. The CSV stays the
primary record; PNGs are a convenience and carry no extra data.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.4,
    "svg.hashsalt": "rankforge",
}

# drop the version string so output bytes depend only on the data
_SAVE_KW = {"dpi": 100, "metadata": {"Software": None}}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path


def trace_figure(rows: list[dict], path, title: str = "") -> Path:
    """Loss, validation RSUM, and smooth vs hard batch NDCG per epoch."""
    epochs = [r["epoch"] for r in rows]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(10, 3))
        axes[0].plot(epochs, [r["loss"] for r in rows], color="k")
        axes[0].set_ylabel("training loss")
        axes[1].plot(epochs, [r["val_rsum"] for r in rows], color="tab:blue")
        axes[1].set_ylabel("validation RSUM")
        ax = axes[2]
        ax.plot(epochs, [r["batch_ndcg_hat_mean"] for r in rows], label="smooth", color="tab:orange")
        ax.plot(epochs, [r["batch_ndcg_mean"] for r in rows], label="hard", color="tab:green", ls="--")
        ax.set_ylabel("batch NDCG")
        twin = ax.twinx()
        twin.plot(epochs, [r["approx_error"] for r in rows], color="tab:red", lw=0.8, label="|error|")
        twin.set_ylabel("approximation error", color="tab:red")
        ax.legend(loc="center right")
        for a in axes:
            a.set_xlabel("epoch")
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        return _save(fig, path)


def tausweep_figure(rows: list[dict], path) -> Path:
    taus = [r["tau"] for r in rows]
    full = all(r.get("rsum") not in (None, "") for r in rows)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2 if full else 1, figsize=(7 if full else 3.6, 3), squeeze=False)
        ax = axes[0, 0]
        ax.loglog(taus, [max(r["approx_error_mean"], 1e-17) for r in rows], "o-", label="mean")
        ax.loglog(taus, [max(r["approx_error_max"], 1e-17) for r in rows], "s--", label="max")
        ax.set_xlabel("tau")
        ax.set_ylabel("approximation error")
        ax.legend()
        if full:
            ax = axes[0, 1]
            ax.semilogx(taus, [r["rsum"] for r in rows], "o-", color="tab:blue")
            ax.set_xlabel("tau")
            ax.set_ylabel("test RSUM")
        fig.tight_layout()
        return _save(fig, path)


def ablation_figure(rows: list[dict], path, metrics=("rsum", "ndcg", "map_at_r")) -> Path:
    """One bar group per metric, one bar per loss; values are means over seeds."""
    losses = list(dict.fromkeys(r["loss"] for r in rows))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(metrics), figsize=(3.2 * len(metrics), 3))
        for ax, metric in zip(axes, metrics):
            means = []
            for loss in losses:
                vals = [float(r[metric]) for r in rows if r["loss"] == loss]
                means.append(sum(vals) / len(vals))
            ax.bar(range(len(losses)), means, color=["0.6", "tab:orange", "tab:blue"][: len(losses)])
            ax.set_xticks(range(len(losses)), losses)
            ax.set_title(metric)
            lo, hi = min(means), max(means)
            pad = (hi - lo) * 0.5 or abs(hi) * 0.05 or 1.0
            ax.set_ylim(lo - pad, hi + pad)
        fig.tight_layout()
        return _save(fig, path)
