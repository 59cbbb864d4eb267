"""Report figures rendered with matplotlib (Agg backend).

These complement the hand-rolled SVG charts: the SVG output is the
byte-stable machine artifact, the PNG figures are for human eyes.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import torch


def fig_training_curves(rows: list[dict], path: str) -> None:
    """Loss against step, one line per scheme, from metrics CSV rows."""
    fig, ax = plt.subplots(figsize=(7, 4.2), dpi=120)
    by_scheme: dict[str, list[tuple[float, float]]] = {}
    for row in rows:
        by_scheme.setdefault(row["scheme"], []).append((float(row["step"]), float(row["loss"])))
    for scheme, pts in sorted(by_scheme.items()):
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], label=scheme, linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title("training loss")
    if by_scheme:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def fig_metric_bars(rows: list[dict], metric: str, path: str, title: str = "") -> None:
    """One bar per row of a summary table (e.g. ablation results)."""
    fig, ax = plt.subplots(figsize=(7, 4.2), dpi=120)
    names = [str(r["scheme"]) for r in rows]
    values = [float(r[metric]) for r in rows]
    ax.bar(range(len(rows)), values, color="#4878a8")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(names, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel(metric)
    ax.set_title(title or metric)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def fig_sample_grid(images: torch.Tensor, path: str, cols: int = 8) -> None:
    """Tile [n, H, W, C] images into one grid figure."""
    arr = images.detach().cpu().numpy() if isinstance(images, torch.Tensor) else np.asarray(images)
    n = arr.shape[0]
    rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(cols * 1.1, rows * 1.1), dpi=120)
    axes = np.atleast_1d(axes).reshape(rows, cols)
    for i in range(rows * cols):
        ax = axes[i // cols, i % cols]
        ax.axis("off")
        if i < n:
            img = np.clip(arr[i], 0.0, 1.0)
            if img.shape[-1] == 1:
                ax.imshow(img[:, :, 0], cmap="gray", vmin=0.0, vmax=1.0)
            else:
                ax.imshow(img)
    fig.tight_layout(pad=0.2)
    fig.savefig(path)
    plt.close(fig)


def fig_diff_maps(maps: list[torch.Tensor], path: str) -> None:
    """Heatmaps of per-scale deviation maps (batch-averaged)."""
    n = len(maps)
    fig, axes = plt.subplots(1, max(n, 1), figsize=(2.2 * max(n, 1), 2.4), dpi=120)
    axes = np.atleast_1d(axes)
    for idx, m in enumerate(maps):
        arr = m.detach().cpu().numpy()
        if arr.ndim == 3:
            arr = arr.mean(0)
        im = axes[idx].imshow(arr, cmap="magma")
        axes[idx].set_title(f"scale {idx + 2}", fontsize=8)
        axes[idx].axis("off")
        fig.colorbar(im, ax=axes[idx], fraction=0.046)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
