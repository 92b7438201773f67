"""Report figures (PNG via the Agg backend, metadata stripped for
byte-identical reruns)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# PNG text chunks would otherwise carry the matplotlib version
_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path


def residual_histogram(residuals, path, title="Reprojection residuals") -> Path:
    r = np.asarray(residuals, float)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.hist(r, bins=30, color="0.4")
    ax.axvline(r.mean(), color="k", ls="--", lw=1, label=f"mean {r.mean():.3f} px")
    ax.set_xlabel("residual [px]")
    ax.set_ylabel("count")
    ax.set_title(title)
    ax.legend(frameon=False)
    fig.tight_layout()
    return _save(fig, path)


def needle_variance_plot(rows, path) -> Path:
    """Per-needle tip error before and after compensation, both cameras."""
    k = np.array([r["needle"] for r in rows])
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.5), sharex=True)
    for ax, cam in zip(axes, (1, 2)):
        ax.plot(k, [r[f"cam{cam}_p_init"] for r in rows], "o-", color="0.6", label="init")
        ax.plot(k, [r[f"cam{cam}_p_comp"] for r in rows], "s-", color="k", label="comp")
        ax.set_title(f"camera {cam}")
        ax.set_xlabel("needle")
    axes[0].set_ylabel("tip error p [px]")
    axes[0].legend(frameon=False)
    fig.tight_layout()
    return _save(fig, path)


def session_distance_plot(records, radius, path) -> Path:
    """Final tip-to-vein distance per attempt, coloured by outcome."""
    colors = {"hit": "tab:green", "shallow": "tab:orange", "deep": "tab:red"}
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for cls, col in colors.items():
        pts = [(r["trial"], r["distance_mm"]) for r in records
               if r["classification"] == cls and r["distance_mm"] is not None]
        if pts:
            x, y = np.array(pts).T
            ax.plot(x, y, ".", color=col, label=cls)
    if radius is not None:
        ax.axhline(radius, color="k", ls="--", lw=1, label="vein radius")
    ax.set_xlabel("trial")
    ax.set_ylabel("tip-to-vein distance [mm]")
    ax.legend(frameon=False, fontsize="small")
    fig.tight_layout()
    return _save(fig, path)


def detection_overlay(img, line_ab, path, aoi=None, tip=None) -> Path:
    """Image with a detected line ``y = a x + b`` and/or tip marker."""
    fig, ax = plt.subplots(figsize=(6, 6 * img.height / img.width))
    ax.imshow(img.data, cmap="gray" if img.channels == 1 else None,
              vmin=0.0, vmax=1.0, interpolation="nearest")
    if line_ab is not None:
        a, b = line_ab
        x = np.array([0.0, img.width - 1.0])
        ax.plot(x, a * x + b, "c-", lw=1)
    if aoi is not None:
        ax.add_patch(plt.Rectangle((aoi.x_min, aoi.y_min), aoi.x_max - aoi.x_min,
                                   aoi.y_max - aoi.y_min, fill=False, ec="y", lw=1))
    if tip is not None:
        ax.plot([tip[0]], [tip[1]], "r+", ms=12)
    ax.set_xlim(-0.5, img.width - 0.5)
    ax.set_ylim(img.height - 0.5, -0.5)
    ax.set_axis_off()
    fig.tight_layout()
    return _save(fig, path)
