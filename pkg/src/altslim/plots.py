"""Static figures written next to the JSON/CSV reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

PHASE_COLORS = {
    "bottleneck_align": "tab:blue",
    "embedding_align": "tab:orange",
    "final_align": "tab:gray",
}


def plot_training_curves(logs: dict, path, title: str = ""):
    """Validation fidelity and train loss against cumulative epoch, one colour per phase."""
    fig, (ax_val, ax_train) = plt.subplots(1, 2, figsize=(9, 3.4))
    offset = 0
    for phase, tl in logs.items():
        epochs = [offset + r["epoch"] + 1 for r in tl.records]
        color = PHASE_COLORS.get(phase)
        ax_val.plot(epochs, tl.column("val_fidelity"), "o-", ms=3, color=color, label=phase)
        ax_train.plot(epochs, tl.column("train_loss"), "o-", ms=3, color=color, label=phase)
        offset += len(tl.records)
    for ax, ylabel in ((ax_val, "val fidelity MSE"), (ax_train, "train loss")):
        ax.set_xlabel("epoch")
        ax.set_ylabel(ylabel)
        # all-zero curves (e.g. nothing pruned) stay on a linear axis
        if any(y > 0 for line in ax.get_lines() for y in line.get_ydata()):
            ax.set_yscale("log")
        ax.grid(alpha=0.3)
    ax_val.legend(fontsize=8)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_comparison(rows: list, path, metric: str = "fidelity_mse"):
    """Paired per-seed bars for every method present in ``rows``."""
    seeds = sorted({r["seed"] for r in rows})
    methods = list(dict.fromkeys(r["method"] for r in rows))
    width = 0.8 / max(len(methods), 1)
    fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(seeds), 3.2))
    for j, m in enumerate(methods):
        vals = {r["seed"]: r[metric] for r in rows if r["method"] == m}
        xs = [i + (j - (len(methods) - 1) / 2) * width for i in range(len(seeds))]
        ax.bar(xs, [vals.get(s, float("nan")) for s in seeds], width, label=m)
    ax.set_xticks(range(len(seeds)))
    ax.set_xticklabels([f"seed {s}" for s in seeds])
    ax.set_ylabel(metric)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
