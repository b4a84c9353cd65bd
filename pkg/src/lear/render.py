"""Figure-style grids: input, signed counterfactual map, transformed image."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import LinearSegmentedColormap  # noqa: E402

# blue = subtraction, white = no change, yellow/red = addition
DIVERGING = LinearSegmentedColormap.from_list(
    "lear_diverging", [(0.0, "#08306b"), (0.25, "#4292c6"), (0.5, "#ffffff"), (0.75, "#fed976"), (1.0, "#bd0026")])

PNG_META = {"Software": None}


def symmetric_limit(m, percentile: float = 99.0) -> float:
    """Color limit at the given percentile of |m|; 1.0 for an all-zero map."""
    v = float(np.percentile(np.abs(np.asarray(m, dtype=np.float64)), percentile))
    return v if v > 0 else 1.0


def _fmt_posterior(p: Optional[Sequence[float]]) -> str:
    if p is None:
        return ""
    p = np.asarray(p, dtype=np.float64)
    top = int(p.argmax())
    return f"argmax {top} (p={p[top]:.2f})\n[" + " ".join(f"{v:.2f}" for v in p) + "]"


def _fmt_target(t) -> str:
    return "target [" + " ".join(f"{v:.2f}" for v in np.asarray(t, dtype=np.float64)) + "]"


def mid_slices(volume: np.ndarray) -> dict:
    """Axial, coronal and sagittal mid-slices of a W x H x D (x C) volume."""
    v = np.asarray(volume)
    if v.ndim == 4:
        v = v[..., 0]
    w, h, d = v.shape
    return {"axial": v[:, :, d // 2].T, "coronal": v[:, h // 2, :].T, "sagittal": v[w // 2, :, :].T}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", dpi=100, metadata=PNG_META)
    plt.close(fig)
    return path


def render_planar(x, m, x_tilde, path, posterior_x=None, posterior_tilde=None, target=None) -> Path:
    """Three panels: input, map on a symmetric diverging scale, transformed image."""
    x, m, x_tilde = (np.asarray(a, dtype=np.float64).squeeze(-1) for a in (x, m, x_tilde))
    lim = symmetric_limit(m)
    fig, axes = plt.subplots(1, 3, figsize=(9, 3.6))
    axes[0].imshow(x, cmap="gray")
    axes[0].set_title("input\n" + _fmt_posterior(posterior_x), fontsize=8)
    im = axes[1].imshow(m, cmap=DIVERGING, vmin=-lim, vmax=lim)
    axes[1].set_title("map\n" + (_fmt_target(target) if target is not None else ""), fontsize=8)
    fig.colorbar(im, ax=axes[1], fraction=0.046, pad=0.04)
    axes[2].imshow(x_tilde, cmap="gray")
    axes[2].set_title("transformed\n" + _fmt_posterior(posterior_tilde), fontsize=8)
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    return _save(fig, path)


def render_volumetric(x, m, x_tilde, path, posterior_x=None, posterior_tilde=None, target=None) -> Path:
    """Rows input / map / transformed, columns axial / coronal / sagittal mid-slices."""
    lim = symmetric_limit(m)
    rows = [("input", mid_slices(x), "gray", None), ("map", mid_slices(m), DIVERGING, lim),
            ("transformed", mid_slices(x_tilde), "gray", None)]
    titles = {"input": _fmt_posterior(posterior_x), "transformed": _fmt_posterior(posterior_tilde),
              "map": _fmt_target(target) if target is not None else ""}
    fig, axes = plt.subplots(3, 3, figsize=(9, 9))
    for r, (name, views, cmap, vlim) in enumerate(rows):
        for c, view in enumerate(("axial", "coronal", "sagittal")):
            ax = axes[r, c]
            kw = dict(vmin=-vlim, vmax=vlim) if vlim else {}
            ax.imshow(views[view], cmap=cmap, origin="lower", **kw)
            ax.set_xticks([])
            ax.set_yticks([])
            if r == 0:
                ax.set_title(view, fontsize=9)
            if c == 0:
                ax.set_ylabel(f"{name}\n{titles[name]}", fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def render_grid(x, m, x_tilde, path, **kw) -> Path:
    """Dispatch on rank: (H, W, C) planar or (W, H, D, C) volumetric."""
    if np.ndim(x) == 3:
        return render_planar(x, m, x_tilde, path, **kw)
    if np.ndim(x) == 4:
        return render_volumetric(x, m, x_tilde, path, **kw)
    raise ValueError(f"cannot render an image of shape {np.shape(x)}")
