"""Disk phantom description and rasterization into per-material density maps."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import yaml

from .materials import MaterialTable, interpolate_mu


@dataclass(frozen=True)
class Disk:
    center_cm: tuple            # (x, y) in cm, origin at image centre
    radius_cm: float
    composition: tuple          # ((material, density g/cm^3), ...)


@dataclass(frozen=True)
class PhantomSpec:
    width: int
    height: int
    pixel_size_cm: float
    background: tuple           # ((material, density g/cm^3), ...)
    inserts: tuple              # tuple of Disk
    material_names: tuple

    def __post_init__(self):
        if self.width < 1 or self.height < 1 or self.pixel_size_cm <= 0:
            raise ValueError("invalid phantom dimensions")
        half_w = self.width * self.pixel_size_cm / 2
        half_h = self.height * self.pixel_size_cm / 2
        for disk in self.inserts:
            cx, cy = disk.center_cm
            if disk.radius_cm <= 0:
                raise ValueError("disk radius must be positive")
            if (abs(cx) + disk.radius_cm > half_w) or (abs(cy) + disk.radius_cm > half_h):
                raise ValueError(f"disk at {disk.center_cm} extends outside the image")
        for mat, rho in list(self.background) + [
            c for d in self.inserts for c in d.composition
        ]:
            if rho < 0:
                raise ValueError("densities must be non-negative")
            if mat not in self.material_names:
                raise ValueError(f"material {mat!r} not in declared material set")


@dataclass
class DensityMaps:
    """Per-material mass density rasters in g/cm^3, shape (M, H, W)."""

    maps: np.ndarray
    material_names: tuple
    pixel_size_cm: float = 1.0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.maps = np.asarray(self.maps, dtype=float)
        self.material_names = tuple(self.material_names)
        if self.maps.ndim != 3 or self.maps.shape[0] != len(self.material_names):
            raise ValueError("maps must be (M, H, W) matching material_names")
        if not np.all(np.isfinite(self.maps)) or np.any(self.maps < 0):
            raise ValueError("densities must be finite and non-negative")

    @property
    def height(self):
        return self.maps.shape[1]

    @property
    def width(self):
        return self.maps.shape[2]


def pixel_centers(width: int, height: int, pixel_size_cm: float):
    """Pixel-centre coordinates in cm, origin at the image centre."""
    xs = (np.arange(width) - (width - 1) / 2) * pixel_size_cm
    ys = (np.arange(height) - (height - 1) / 2) * pixel_size_cm
    return xs, ys


def rasterize(spec: PhantomSpec) -> DensityMaps:
    """Centre-in-circle rasterization; later disks override earlier ones."""
    xs, ys = pixel_centers(spec.width, spec.height, spec.pixel_size_cm)
    xx, yy = np.meshgrid(xs, ys)
    mat_index = {m: i for i, m in enumerate(spec.material_names)}
    maps = np.zeros((len(spec.material_names), spec.height, spec.width))
    for mat, rho in spec.background:
        maps[mat_index[mat]] += rho

    claimed = np.zeros((spec.height, spec.width), dtype=bool)
    overlaps = []
    for d, disk in enumerate(spec.inserts):
        cx, cy = disk.center_cm
        inside = (xx - cx) ** 2 + (yy - cy) ** 2 < disk.radius_cm**2
        if np.any(inside & claimed):
            overlaps.append(d)
        claimed |= inside
        maps[:, inside] = 0.0
        for mat, rho in disk.composition:
            maps[mat_index[mat], inside] = rho
    meta = {"pixel_size_cm": spec.pixel_size_cm}
    if overlaps:
        meta["overlapping_inserts"] = overlaps
    return DensityMaps(maps, spec.material_names, spec.pixel_size_cm, meta)


def attenuation_image(maps: DensityMaps, tables, energy: float) -> np.ndarray:
    """Linear attenuation raster (1/cm) at one energy."""
    by_name = {t.name: t for t in tables}
    out = np.zeros(maps.maps.shape[1:])
    for a, mat in enumerate(maps.material_names):
        if mat not in by_name:
            raise ValueError(f"no attenuation table for material {mat!r}")
        out += interpolate_mu(by_name[mat], energy) * maps.maps[a]
    return out


def _parse_composition(node) -> tuple:
    comp = []
    for entry in node:
        comp.append((str(entry["material"]), float(entry["density_mg_cc"]) / 1000.0))
    return tuple(comp)


def load_phantom_spec(path) -> PhantomSpec:
    """Read the documented YAML phantom description (densities in mg/cc)."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    try:
        inserts = tuple(
            Disk(
                center_cm=(float(d["center_cm"][0]), float(d["center_cm"][1])),
                radius_cm=float(d["radius_cm"]),
                composition=_parse_composition(d["composition"]),
            )
            for d in doc.get("inserts", [])
        )
        background = _parse_composition(doc.get("background", []))
        spec = PhantomSpec(
            width=int(doc["width"]),
            height=int(doc["height"]),
            pixel_size_cm=float(doc["pixel_size_cm"]),
            background=background,
            inserts=inserts,
            material_names=tuple(doc["materials"]),
        )
    except KeyError as exc:
        raise ValueError(f"{path}: missing phantom key {exc}") from exc
    return spec
