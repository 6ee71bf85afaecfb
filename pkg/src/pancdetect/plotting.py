"""Report figures: loss curves, the metric comparison chart, and case
slices with mask contours. Everything renders off-screen to files."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .volume import COMMON_BILE_DUCT, CT, PANCREAS, PANCREATIC_DUCT, center_of_mass

MODE_COLORS = {"ct_only": "#8c8c8c", "binary_ducts": "#d9a441", "full": "#3b6ea8"}
MASK_COLORS = {
    PANCREAS: "#f2c14e",
    PANCREATIC_DUCT: "#2a9d8f",
    COMMON_BILE_DUCT: "#6a4c93",
    "label": "#e63946",
    "prediction": "#00b4d8",
}


def style():
    plt.rcParams.update(
        {
            "font.size": 9,
            "axes.titlesize": 10,
            "axes.spines.top": False,
            "axes.spines.right": False,
            "savefig.dpi": 150,
            "savefig.bbox": "tight",
        }
    )


def plot_histories(histories, path):
    """``histories`` maps mode -> list of per-fold history rows."""
    style()
    modes = list(histories)
    fig, axes = plt.subplots(1, len(modes), figsize=(3.2 * len(modes), 2.8), sharey=True, squeeze=False)
    for ax, mode in zip(axes[0], modes):
        for k, hist in enumerate(histories[mode]):
            ep = [r["epoch"] for r in hist]
            ax.plot(ep, [r["train_loss"] for r in hist], color=MODE_COLORS.get(mode, "k"), alpha=0.5,
                    label="train" if k == 0 else None)
            ax.plot(ep, [r["val_loss"] for r in hist], color=MODE_COLORS.get(mode, "k"), ls="--",
                    label="validation" if k == 0 else None)
        ax.set_title(mode)
        ax.set_xlabel("epoch")
        ax.set_yscale("log")
    axes[0][0].set_ylabel("cross-entropy")
    axes[0][0].legend(frameon=False)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_summary(summaries, path):
    """Grouped bars (mean over folds, sd error bars) per mode and metric."""
    style()
    metrics = ("sensitivity", "specificity", "dice")
    modes = list(summaries)
    width = 0.8 / max(len(modes), 1)
    fig, ax = plt.subplots(figsize=(5.0, 2.8))
    x = np.arange(len(metrics))
    for i, mode in enumerate(modes):
        means = [summaries[mode][m]["mean"] or 0.0 for m in metrics]
        sds = [summaries[mode][m]["sd"] or 0.0 for m in metrics]
        ax.bar(x + (i - (len(modes) - 1) / 2) * width, means, width, yerr=sds, capsize=2,
               color=MODE_COLORS.get(mode), label=mode)
    ax.set_xticks(x)
    ax.set_xticklabels(metrics)
    ax.set_ylim(0, 1.05)
    ax.legend(frameon=False, fontsize=8, ncol=len(modes), loc="upper center", bbox_to_anchor=(0.5, 1.18))
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_case(case, path, prediction=None, axis=0):
    """Slice through the label (or pancreas) center with mask contours."""
    style()
    ref = case.y.data if case.y.data.any() else case.x[PANCREAS].data
    k = int(round(center_of_mass(ref)[axis]))
    take = lambda a: np.take(a, k, axis=axis)
    fig, ax = plt.subplots(figsize=(3.4, 3.4))
    ax.imshow(take(case.x[CT].data), cmap="gray", interpolation="nearest")
    layers = [(n, case.x[n].data) for n in (PANCREAS, PANCREATIC_DUCT, COMMON_BILE_DUCT) if n in case.x]
    layers.append(("label", case.y.data))
    if prediction is not None:
        layers.append(("prediction", np.asarray(prediction)))
    for name, data in layers:
        sl = take(data)
        if sl.any() and sl.min() != sl.max():
            ax.contour(sl, levels=[0.5], colors=[MASK_COLORS[name]], linewidths=0.9)
    ax.set_title(f"{case.case_id} ({'tumor' if case.is_tumor_case else 'control'}), slice {k}")
    ax.axis("off")
    handles = [plt.Line2D([], [], color=MASK_COLORS[n], label=n) for n, d in layers if take(d).any()]
    if handles:
        ax.legend(handles=handles, frameon=False, fontsize=6, loc="lower left")
    fig.savefig(path)
    plt.close(fig)
    return path
