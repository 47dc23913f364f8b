"""Figure emission for the report path: per-material density PNGs with
fixed windowing, method comparison panels and parameter-sweep curves."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .phantom import DensityMaps


def material_windows(gt: DensityMaps) -> dict:
    """Fixed display window per material in mg/cc, from the ground truth."""
    windows = {}
    for a, mat in enumerate(gt.material_names):
        top = float(gt.maps[a].max()) * 1000.0
        windows[mat] = (0.0, top * 1.2 if top > 0 else 1.0)
    return windows


def save_density_pngs(maps: DensityMaps, windows: dict, out_dir: Path,
                      prefix: str) -> list:
    """Grayscale PNG per material; windowing recorded in a JSON sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    sidecar = {}
    for a, mat in enumerate(maps.material_names):
        lo, hi = windows[mat]
        img = np.clip(maps.maps[a] * 1000.0, lo, hi)
        path = out_dir / f"{prefix}_{mat}.png"
        plt.imsave(path, img, cmap="gray", vmin=lo, vmax=hi)
        sidecar[mat] = {"file": path.name, "window_mg_cc": [lo, hi]}
        written.append(path)
    (out_dir / f"{prefix}_windows.json").write_text(
        json.dumps(sidecar, indent=2, sort_keys=True)
    )
    return written


def save_comparison_figure(maps_by_method: dict, gt: DensityMaps,
                           windows: dict, path: Path):
    """Grid figure: one row per material, one column per method plus truth."""
    methods = list(maps_by_method)
    mats = list(gt.material_names)
    ncols = len(methods) + 1
    fig, axes = plt.subplots(len(mats), ncols,
                             figsize=(2.2 * ncols, 2.2 * len(mats)),
                             squeeze=False)
    for r, mat in enumerate(mats):
        a = gt.material_names.index(mat)
        lo, hi = windows[mat]
        axes[r][0].imshow(gt.maps[a] * 1000.0, cmap="gray", vmin=lo, vmax=hi)
        axes[r][0].set_ylabel(mat, fontsize=9)
        if r == 0:
            axes[r][0].set_title("truth", fontsize=9)
        for c, method in enumerate(methods, start=1):
            m = maps_by_method[method]
            axes[r][c].imshow(m.maps[a] * 1000.0, cmap="gray", vmin=lo, vmax=hi)
            if r == 0:
                axes[r][c].set_title(method, fontsize=9)
    for ax in axes.ravel():
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_sweep_figure(values, errors_by_material: dict, xlabel: str, path: Path):
    """Error curves against a swept parameter (threshold or kernel weight)."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for mat, errs in errors_by_material.items():
        ax.plot(values, errs, marker="o", label=mat)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("normalized Euclidean distance")
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
