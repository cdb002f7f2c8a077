"""Figures written next to CSV reports (Agg backend, PNG output)."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

MODE_COLOURS = {"degraded": "#9e9e9e", "base": "#4c72b0", "masked": "#dd8452"}


def _finite(values):
    return [v for v in values if math.isfinite(v)]


def plot_eval(reports: dict, path, title: str | None = None) -> None:
    """Mean PSNR/SSIM bars per mode and the per-image PSNR spread."""
    modes = list(reports)
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.4))
    colours = [MODE_COLOURS.get(m, "#55a868") for m in modes]

    psnr_means = [np.mean(_finite([r[1] for r in reports[m].rows]) or [np.nan]) for m in modes]
    axes[0].bar(modes, psnr_means, color=colours)
    axes[0].set_ylabel("mean PSNR (dB)")
    for i, v in enumerate(psnr_means):
        axes[0].annotate(f"{v:.2f}", (i, v), ha="center", va="bottom", fontsize=8)

    axes[1].bar(modes, [reports[m].mean_ssim for m in modes], color=colours)
    axes[1].set_ylabel("mean SSIM")
    axes[1].set_ylim(0, 1)

    axes[2].boxplot([_finite([r[1] for r in reports[m].rows]) for m in modes])
    axes[2].set_xticks(range(1, len(modes) + 1), modes)
    axes[2].set_ylabel("per-image PSNR (dB)")

    task = next(iter(reports.values())).task if reports else ""
    fig.suptitle(title or f"{task}: restoration quality by parameter mode")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_loss_curve(rows, path, title: str = "training loss") -> None:
    """``rows`` are (epoch, task, loss) triples as logged during training."""
    fig, ax = plt.subplots(figsize=(5.5, 3.4))
    for task in dict.fromkeys(r[1] for r in rows):
        pts = [(r[0], r[2]) for r in rows if r[1] == task]
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker=".", label=task)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss")
    ax.set_yscale("log")
    ax.set_title(title)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_mask_layers(store, registry, path) -> None:
    """Fraction of each parameter tensor selected by every task mask."""
    tasks = store.tasks()
    names = [e.name for e in registry]
    fig, ax = plt.subplots(figsize=(max(6, 0.35 * len(names)), 3.6))
    width = 0.8 / max(len(tasks), 1)
    x = np.arange(len(names))
    for j, t in enumerate(tasks):
        bits = store.masks[t].bits
        frac = [bits[e.offset:e.offset + e.length].mean() for e in registry]
        ax.bar(x + j * width, frac, width, label=t.label)
    ax.set_xticks(x + 0.4 - width / 2, names, rotation=70, ha="right", fontsize=7)
    ax.set_ylabel("masked fraction")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
