"""Matplotlib renderings for training logs and learnt components (file output only)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import geometry as geo  # noqa: E402


def plot_training_curves(log, path) -> Path:
    """Loss parts (log scale) and validation accuracy against step."""
    path = Path(path)
    steps = log.column("step")
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.5))
    for name in ("l_class", "l_tex", "l_sym", "l_area"):
        vals = log.column(name)
        ok = np.isfinite(vals) & (vals > 0)
        if ok.any():
            ax_loss.semilogy(steps[ok], vals[ok], label=name)
    ax_loss.set_xlabel("step")
    ax_loss.set_ylabel("loss")
    if ax_loss.lines:
        ax_loss.legend(fontsize=8)
    acc = log.column("val_acc")
    ok = np.isfinite(acc)
    if ok.any():
        ax_acc.plot(steps[ok], acc[ok], marker="o", ms=3)
        ax_acc.set_ylim(0, 1.02)
    else:
        ax_acc.text(0.5, 0.5, "no validation data", ha="center", va="center",
                    transform=ax_acc.transAxes)
    ax_acc.set_xlabel("step")
    ax_acc.set_ylabel("validation accuracy")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def _draw_grid(ax, pts, tris, colour):
    for a, b in geo.triangulation_edges(tris):
        ax.plot(pts[0, [a, b]], pts[1, [a, b]], color=colour, lw=0.8)


def plot_components(mean_texture: np.ndarray, tex_views: list, shape_mean: np.ndarray,
                    shape_views: list, tris: np.ndarray, path) -> Path:
    """Rows of (-2 sigma, mean, +2 sigma) panels for shape and texture components.

    ``tex_views`` and ``shape_views`` hold ``(minus, plus)`` pairs of images
    and (2, N) grids respectively.
    """
    path = Path(path)
    rows = max(len(tex_views), len(shape_views), 1)
    fig, axes = plt.subplots(rows, 6, figsize=(10, 1.8 * rows + 0.4), squeeze=False)
    for ax in axes.ravel():
        ax.set_xticks([])
        ax.set_yticks([])
    for k in range(rows):
        if k < len(shape_views):
            minus, plus = shape_views[k]
            for j, pts in enumerate((minus, shape_mean, plus)):
                ax = axes[k, j]
                _draw_grid(ax, pts, tris, "tab:green" if j == 1 else "tab:blue")
                ax.set_xlim(-1.1, 1.1)
                ax.set_ylim(1.1, -1.1)
                ax.set_aspect("equal")
        if k < len(tex_views):
            minus, plus = tex_views[k]
            for j, img in enumerate((minus, mean_texture, plus)):
                axes[k, 3 + j].imshow(np.clip(img.squeeze(), 0, 1), cmap="gray",
                                      vmin=0, vmax=1)
        axes[k, 0].set_ylabel(f"c{k + 1}")
    for j, title in enumerate(("shape -2s", "shape mean", "shape +2s",
                               "texture -2s", "texture mean", "texture +2s")):
        axes[0, j].set_title(title, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
