"""Read/write domain objects through the SCTR1 raster container."""

from __future__ import annotations

import numpy as np

from .phantom import DensityMaps
from .projector import Geometry, Sinogram
from .rasterio import read_raster, write_raster
from .recon import MultiEnergyImage
from .segmentation import LabelImage


def save_sinogram(path, sino: Sinogram):
    g = sino.geometry
    meta = {
        "bins": [list(b) for b in sino.bins],
        "geometry": {
            "n_detectors": g.n_detectors,
            "detector_spacing": g.detector_spacing,
            "n_views": g.n_views,
            "width": g.width,
            "height": g.height,
            "pixel_size": g.pixel_size,
        },
        **sino.metadata,
    }
    # (B, n_views, n_detectors) maps onto (channels, height, width)
    write_raster(path, sino.data, sino.kind, meta)


def load_sinogram(path) -> Sinogram:
    data, kind, meta = read_raster(path)
    g = meta["geometry"]
    angles = np.arange(g["n_views"]) * (2 * np.pi / g["n_views"])
    geom = Geometry(g["n_detectors"], g["detector_spacing"], angles,
                    g["width"], g["height"], g["pixel_size"])
    bins = tuple(tuple(b) for b in meta["bins"])
    extra = {k: v for k, v in meta.items() if k not in ("bins", "geometry")}
    return Sinogram(data, geom, bins, kind=kind, metadata=extra)


def save_multi_energy(path, y: MultiEnergyImage):
    meta = {
        "bins": [list(b) for b in y.bins],
        "pixel_size_cm": y.pixel_size_cm,
        **y.metadata,
    }
    write_raster(path, y.data, "multi_energy", meta)


def load_multi_energy(path) -> MultiEnergyImage:
    data, kind, meta = read_raster(path)
    if kind != "multi_energy":
        raise ValueError(f"{path}: expected a multi_energy raster, got {kind!r}")
    bins = tuple(tuple(b) for b in meta["bins"])
    extra = {k: v for k, v in meta.items() if k not in ("bins", "pixel_size_cm")}
    return MultiEnergyImage(data, bins, meta.get("pixel_size_cm", 1.0), extra)


def save_density_maps(path, maps: DensityMaps):
    meta = {
        "material_names": list(maps.material_names),
        "pixel_size_cm": maps.pixel_size_cm,
        **{k: v for k, v in maps.metadata.items() if _jsonable(v)},
    }
    write_raster(path, maps.maps, "density_maps", meta)


def load_density_maps(path) -> DensityMaps:
    data, kind, meta = read_raster(path)
    if kind != "density_maps":
        raise ValueError(f"{path}: expected a density_maps raster, got {kind!r}")
    names = tuple(meta["material_names"])
    extra = {k: v for k, v in meta.items()
             if k not in ("material_names", "pixel_size_cm")}
    return DensityMaps(data, names, meta.get("pixel_size_cm", 1.0), extra)


def save_label_image(path, labels: LabelImage):
    if not labels.shape:
        raise ValueError("label image has no raster shape")
    meta = {
        "K": labels.K,
        "means": labels.means.tolist(),
        **{k: v for k, v in labels.metadata.items() if _jsonable(v)},
    }
    raster = labels.labels.reshape(labels.shape).astype(np.int32)
    write_raster(path, raster, "roi_labels", meta)


def load_label_image(path) -> LabelImage:
    data, kind, meta = read_raster(path)
    if kind != "roi_labels":
        raise ValueError(f"{path}: expected a roi_labels raster, got {kind!r}")
    labels = data[0].ravel().astype(int)
    means = np.asarray(meta["means"], dtype=float)
    extra = {k: v for k, v in meta.items() if k not in ("K", "means")}
    return LabelImage(labels, int(meta["K"]), means, data.shape[1:], extra)


def _jsonable(v) -> bool:
    import json

    try:
        json.dumps(v)
        return True
    except (TypeError, ValueError):
        return False
