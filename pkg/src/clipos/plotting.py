"""Matplotlib figures written beside the CSV outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "axes.labelsize": 11,
    "axes.titlesize": 12,
    "font.size": 10,
    "legend.fontsize": 9,
    "lines.linewidth": 2,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
}


def _save(fig, path):
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path


def loss_curve(history, path):
    epochs = np.arange(1, len(history) + 1)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.plot(epochs, [r.total for r in history], label="total")
        ax.plot(epochs, [r.id_loss for r in history], "--", label="ID")
        ax.plot(epochs, [r.ood_loss for r in history], ":", label="OOD")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend(frameon=False)
        return _save(fig, path)


def beta_sweep(reports: dict, path):
    betas = sorted(reports)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.plot(betas, [100 * reports[b].average for b in betas], "o-")
        ax.set_xlabel(r"patch-context weight $\beta$")
        ax.set_ylabel("average AUROC (%)")
        return _save(fig, path)


def ablation_bars(reports: dict, path):
    names = list(reports)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.2 * len(names) + 2, 3.2))
        values = [100 * reports[n].average for n in names]
        ax.bar(range(len(names)), values, color="0.55")
        ax.set_xticks(range(len(names)), names, rotation=20, ha="right")
        ax.set_ylabel("average AUROC (%)")
        lo = min(values)
        ax.set_ylim(max(0.0, lo - 5), min(100.0, max(values) + 2))
        return _save(fig, path)


def _display(image, prep):
    mean = np.asarray(prep.mean)[:, None, None]
    std = np.asarray(prep.std)[:, None, None]
    arr = image.detach().cpu().numpy() * std + mean
    arr = arr.transpose(1, 2, 0)
    lo, hi = arr.min(), arr.max()
    return (arr - lo) / (hi - lo) if hi > lo else np.zeros_like(arr)


def mask_panel(image, prep, masks, path, title=None):
    """Input, surgery map, plain map and the extracted region side by side."""
    extent = (0, image.shape[-1], image.shape[-2], 0)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 4, figsize=(10, 2.8))
        axes[0].imshow(_display(image, prep))
        axes[0].set_title(title or "input")
        for ax, grid, name in ((axes[1], masks.smap, "SMap"), (axes[2], masks.smap_clip, "SMap (plain)")):
            im = ax.imshow(grid.cpu().numpy(), cmap="jet", vmin=0, vmax=1, extent=extent)
            ax.set_title(name)
        fig.colorbar(im, ax=axes[1:3], fraction=0.025)
        axes[3].imshow(_display(image, prep))
        axes[3].imshow(masks.mask.cpu().numpy(), cmap="gray", alpha=0.6, extent=extent, vmin=0, vmax=1)
        axes[3].set_title("ID region")
        for ax in axes:
            ax.set_xticks([])
            ax.set_yticks([])
        return _save(fig, path)
