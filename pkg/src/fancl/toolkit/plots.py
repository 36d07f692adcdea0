"""Report figures rendered with matplotlib's Agg backend.

Figures are built through the object API (``Figure`` + ``FigureCanvasAgg``)
so nothing touches pyplot's global state or needs a display.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib import rc_context
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

RC = {"font.size": 8, "axes.titlesize": 8, "axes.labelsize": 8}


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    FigureCanvasAgg(fig)
    try:
        fig.savefig(path, dpi=120, bbox_inches="tight")
    except OSError as exc:
        raise OSError(f"cannot write figure {path}: {exc.strerror}") from exc
    return path


def _show_image(ax, img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[-1] == 1:
        img = img[..., 0]
    kw = {"cmap": "gray"} if img.ndim == 2 else {}
    ax.imshow(np.clip(img, 0.0, 1.0), interpolation="nearest", **kw)
    ax.set_xticks([])
    ax.set_yticks([])


@rc_context(RC)
def fana_panel(image, amap, mask, noised, path, rho: float | None = None) -> Path:
    """Four-up panel: input, activation map, noise mask, noised image."""
    fig = Figure(figsize=(6.4, 1.8))
    axes = fig.subplots(1, 4)
    _show_image(axes[0], image)
    axes[0].set_title("input")
    axes[1].imshow(np.asarray(amap, dtype=np.float64), cmap="viridis", interpolation="nearest")
    axes[1].set_xticks([])
    axes[1].set_yticks([])
    axes[1].set_title("activation")
    _show_image(axes[2], np.asarray(mask, dtype=np.float64))
    axes[2].set_title(f"mask ({int(np.asarray(mask).sum())} px)")
    _show_image(axes[3], noised)
    axes[3].set_title("noised" if rho is None else f"noised, rho={rho:g}")
    return _save(fig, path)


@rc_context(RC)
def cmc_plot(curve, path, label: str | None = None) -> Path:
    curve = np.asarray(curve, dtype=np.float64)
    ranks = np.arange(1, curve.size + 1)
    fig = Figure(figsize=(3.2, 2.4))
    ax = fig.subplots()
    ax.step(ranks, curve, where="post", label=label)
    ax.set_xlabel("rank")
    ax.set_ylabel("matching rate")
    ax.set_ylim(0.0, 1.02)
    ax.set_xlim(1, max(ranks[-1], 2))
    ax.grid(alpha=0.3)
    if label:
        ax.legend(loc="lower right", frameon=False)
    return _save(fig, path)


@rc_context(RC)
def loss_plot(records, path) -> Path:
    """Per-iteration loss terms from metrics records, x = global iteration."""
    rows = [r for r in records if "iter" in r]
    fig = Figure(figsize=(3.6, 2.4))
    ax = fig.subplots()
    if rows:
        x = np.arange(len(rows))
        for key in ("L_total", "L_cluster-all", "L_consistency"):
            ax.plot(x, [r[key] for r in rows], lw=0.8, label=key)
        ax.legend(frameon=False)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.grid(alpha=0.3)
    return _save(fig, path)
