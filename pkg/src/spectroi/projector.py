"""Parallel-beam line-integral operators and the polychromatic
photon-counting acquisition model with Poisson noise.

forward_project / back_project are an exact adjoint pair: both use the
same Joseph-style interpolation indices and weights, so <Ax, y> equals
<x, A^T y> up to floating-point accumulation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .materials import DetectorResponse, Spectrum, bin_fluence, interpolate_mu
from .phantom import DensityMaps

ZERO_COUNT_FLOOR = 0.5


@dataclass(frozen=True)
class Geometry:
    n_detectors: int
    detector_spacing: float     # cm
    angles: np.ndarray          # radians
    width: int
    height: int
    pixel_size: float           # cm

    def __post_init__(self):
        a = np.asarray(self.angles, dtype=float)
        object.__setattr__(self, "angles", a)
        if self.n_detectors < 1 or self.detector_spacing <= 0:
            raise ValueError("invalid detector layout")
        if self.pixel_size <= 0 or self.width < 1 or self.height < 1:
            raise ValueError("invalid image grid")

    @property
    def n_views(self):
        return self.angles.size


def default_geometry(width, height, pixel_size, n_views, n_detectors=None,
                     detector_spacing=None):
    if n_detectors is None:
        n_detectors = max(width, height)
    if detector_spacing is None:
        detector_spacing = pixel_size
    angles = np.arange(n_views) * (2 * np.pi / n_views)
    return Geometry(n_detectors, detector_spacing, angles, width, height, pixel_size)


@dataclass
class Sinogram:
    """Per-bin projection data, shape (B, n_views, n_detectors)."""

    data: np.ndarray
    geometry: Geometry
    bins: tuple
    kind: str = "counts"        # "counts" or "line_integral"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.kind not in ("counts", "line_integral"):
            raise ValueError(f"unknown sinogram kind {self.kind!r}")
        if self.data.ndim != 3:
            raise ValueError("sinogram data must be (B, n_views, n_detectors)")
        if self.data.shape[1:] != (self.geometry.n_views, self.geometry.n_detectors):
            raise ValueError("sinogram shape does not match geometry")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("sinogram data must be finite")
        if self.kind == "counts" and np.any(self.data < 0):
            raise ValueError("counts must be non-negative")


def _view_weights(geom: Geometry, angle: float):
    """Joseph traversal for one view.

    Returns (step, flat0, w1, valid, stride) where flat0 indexes the
    lower interpolation neighbour in the flattened image for every
    (driving row, detector) pair and flat0 + stride its partner.
    """
    c, s = np.cos(angle), np.sin(angle)
    nd = geom.n_detectors
    t = (np.arange(nd) - (nd - 1) / 2) * geom.detector_spacing
    W, H, p = geom.width, geom.height, geom.pixel_size

    if abs(c) >= abs(s):
        # Ray mostly vertical: drive over image rows, interpolate in x.
        ys = (np.arange(H) - (H - 1) / 2) * p
        xpos = (t[None, :] - ys[:, None] * s) / c
        fx = xpos / p + (W - 1) / 2
        i0 = np.floor(fx).astype(np.int64)
        w1 = fx - i0
        valid = (i0 >= 0) & (i0 <= W - 2)
        rows = np.broadcast_to(np.arange(H)[:, None], i0.shape)
        flat0 = np.where(valid, rows * W + np.clip(i0, 0, W - 2), -1)
        step = p / abs(c)
        stride = 1
    else:
        xs = (np.arange(W) - (W - 1) / 2) * p
        ypos = (t[None, :] - xs[:, None] * c) / s
        fy = ypos / p + (H - 1) / 2
        j0 = np.floor(fy).astype(np.int64)
        w1 = fy - j0
        valid = (j0 >= 0) & (j0 <= H - 2)
        cols = np.broadcast_to(np.arange(W)[:, None], j0.shape)
        flat0 = np.where(valid, np.clip(j0, 0, H - 2) * W + cols, -1)
        step = p / abs(s)
        stride = W
    return step, flat0, w1, valid, stride


def forward_project_view(image_flat: np.ndarray, geom: Geometry, angle: float):
    step, flat0, w1, valid, stride = _view_weights(geom, angle)
    idx = np.where(valid, flat0, 0)
    upper = np.where(valid, flat0 + stride, 0)
    vals = (1.0 - w1) * image_flat[idx] + w1 * image_flat[upper]
    vals = np.where(valid, vals, 0.0)
    return step * vals.sum(axis=0)


def back_project_view(proj: np.ndarray, geom: Geometry, angle: float):
    step, flat0, w1, valid, stride = _view_weights(geom, angle)
    n = geom.width * geom.height
    contrib = np.broadcast_to(proj[None, :], flat0.shape) * step
    idx0 = np.where(valid, flat0, n)
    idx1 = np.where(valid, flat0 + stride, n)
    flatidx = np.concatenate([idx0.ravel(), idx1.ravel()])
    weights = np.concatenate(
        [((1.0 - w1) * contrib).ravel(), (w1 * contrib).ravel()]
    )
    out = np.bincount(flatidx, weights=weights, minlength=n + 1)
    return out[:n]


def view_row_sums(geom: Geometry, angle: float):
    """A_v 1 per detector: traversal length through the image support."""
    step, _, _, valid, _ = _view_weights(geom, angle)
    return step * valid.sum(axis=0)


def view_col_sums(geom: Geometry, angle: float):
    """A_v^T 1 over pixels for one view."""
    return back_project_view(np.ones(geom.n_detectors), geom, angle)


def forward_project(image: np.ndarray, geom: Geometry) -> np.ndarray:
    """Line integrals (n_views, n_detectors) of a (H, W) raster."""
    img = np.asarray(image, dtype=float)
    if img.shape != (geom.height, geom.width):
        raise ValueError("image shape does not match geometry grid")
    flat = img.ravel()
    out = np.empty((geom.n_views, geom.n_detectors))
    for v, angle in enumerate(geom.angles):
        out[v] = forward_project_view(flat, geom, angle)
    return out


def back_project(sino: np.ndarray, geom: Geometry) -> np.ndarray:
    """Exact adjoint of forward_project; returns an (H, W) raster."""
    s = np.asarray(sino, dtype=float)
    if s.shape != (geom.n_views, geom.n_detectors):
        raise ValueError("sinogram shape does not match geometry")
    acc = np.zeros(geom.width * geom.height)
    for v, angle in enumerate(geom.angles):
        acc += back_project_view(s[v], geom, angle)
    return acc.reshape(geom.height, geom.width)


def _quadrature_grid(spectrum: Spectrum, tables):
    """Material-table grid restricted to the spectrum support."""
    lo = spectrum.grid.energies[0]
    hi = spectrum.grid.energies[-1]
    union = np.unique(np.concatenate(
        [t.grid.energies for t in tables] + [spectrum.grid.energies]
    ))
    return union[(union >= lo) & (union <= hi)]


def acquire_mean(maps: DensityMaps, spectrum: Spectrum, response: DetectorResponse,
                 tables, geom: Geometry) -> Sinogram:
    """Noiseless polychromatic photon counts per bin.

    The exponent is linear in the per-material density maps, so each
    material is projected once and the energy loop works on sinogram-
    sized arrays only.
    """
    by_name = {t.name: t for t in tables}
    ordered = []
    for mat in maps.material_names:
        if mat not in by_name:
            raise ValueError(f"no attenuation table for material {mat!r}")
        ordered.append(by_name[mat])

    energies = _quadrature_grid(spectrum, ordered)
    fl = np.interp(energies, spectrum.grid.energies, spectrum.fluence,
                   left=0.0, right=0.0)
    mu_me = np.stack([interpolate_mu(t, energies) for t in ordered])  # (M, |E|)

    area_proj = np.stack([
        forward_project(maps.maps[a], geom) for a in range(len(ordered))
    ])  # (M, n_views, n_detectors) of g/cm^2

    sens_e = np.stack([
        np.interp(energies, response.grid.energies, response.sensitivity[i],
                  left=0.0, right=0.0)
        for i in range(response.n_bins)
    ])  # (B, |E|)

    out = np.zeros((response.n_bins, geom.n_views, geom.n_detectors))
    de = np.diff(energies)
    prev_integrand = None
    for k, e in enumerate(energies):
        pathmu = np.tensordot(mu_me[:, k], area_proj, axes=(0, 0))
        trans = np.exp(-pathmu) * fl[k]
        integrand = sens_e[:, k][:, None, None] * trans[None]
        if prev_integrand is not None:
            out += 0.5 * de[k - 1] * (integrand + prev_integrand)
        prev_integrand = integrand
    return Sinogram(out, geom, response.bins, kind="counts")


def poisson_sample(mean: Sinogram, seed: int) -> Sinogram:
    """Independent Poisson counts; Philox keyed by seed, reproducible."""
    if mean.kind != "counts":
        raise ValueError("poisson_sample expects a counts-kind sinogram")
    if np.any(mean.data < 0):
        raise ValueError("Poisson mean must be non-negative")
    rng = np.random.Generator(np.random.Philox(seed))
    noisy = rng.poisson(mean.data).astype(float)
    meta = dict(mean.metadata)
    meta["noise_seed"] = int(seed)
    return Sinogram(noisy, mean.geometry, mean.bins, kind="counts", metadata=meta)


def log_normalize(counts: Sinogram, spectrum: Spectrum, response: DetectorResponse,
                  floor: float = ZERO_COUNT_FLOOR) -> Sinogram:
    """Per-bin -ln((counts + floor) / blank).

    The half-count shift makes the log transform unbiased to O(1/counts^2)
    for Poisson data (plain -ln(counts) overshoots by 1/(2 counts), which
    systematically inflates strongly attenuated rays) and keeps zero-count
    rays finite.
    """
    if counts.kind != "counts":
        raise ValueError("log_normalize expects a counts-kind sinogram")
    blanks = bin_fluence(spectrum, response)
    if np.any(blanks <= 0):
        raise ValueError("zero blank fluence in at least one bin")
    data = -np.log((counts.data + floor) / blanks[:, None, None])
    meta = dict(counts.metadata)
    meta["zero_count_floor"] = floor
    return Sinogram(data, counts.geometry, counts.bins, kind="line_integral",
                    metadata=meta)


def water_linearize(sino: Sinogram, spectrum: Spectrum,
                    response: DetectorResponse, water_table,
                    t_max: float = 100.0, n_samples: int = 2048) -> Sinogram:
    """Water beam-hardening correction of log-normalized projections.

    Within each energy bin the effective attenuation of a thick water path
    drifts toward the harder end of the bin, which the linear decomposition
    model later misreads as a trace of a smoothly-attenuating material.
    This maps each measured value to the water thickness that would have
    produced it and returns thickness times the bin's fluence-weighted
    water attenuation, so pure-water paths become exactly linear.
    """
    if sino.kind != "line_integral":
        raise ValueError("water_linearize expects log-normalized data")
    energies = spectrum.grid.energies
    mu_w = interpolate_mu(water_table, energies)        # 1 g/cm^3 water
    # Negative thicknesses keep the map defined for noise fluctuating
    # below the blank level, avoiding a clipping bias in air regions.
    t = np.linspace(-5.0, t_max, n_samples)
    trans = spectrum.fluence[None, :] * np.exp(-np.outer(t, mu_w))
    data = np.empty_like(sino.data)
    t_mean = np.zeros(sino.data.shape[1:])
    for b in range(response.n_bins):
        s_b = response.sensitivity[b][None, :] * trans
        flux = np.trapezoid(s_b, energies, axis=1)
        blank = float(np.trapezoid(
            spectrum.fluence * response.sensitivity[b], energies))
        p_of_t = -np.log(flux / blank)                  # monotone in t
        mu_eff = float(np.trapezoid(
            spectrum.fluence * response.sensitivity[b] * mu_w, energies
        ) / np.trapezoid(spectrum.fluence * response.sensitivity[b], energies))
        thickness = np.interp(sino.data[b], p_of_t, t)
        data[b] = mu_eff * thickness
        t_mean += thickness / response.n_bins
    meta = dict(sino.metadata)
    meta["water_linearized"] = True
    # Attenuation-weighted mean water-equivalent thickness of the scan,
    # E[t^2]/E[t] over rays with positive path: long rays dominate a
    # reconstructed pixel the same way, so this is the operating point
    # around which a downstream linear model should be calibrated.
    t_ray = np.clip(t_mean, 0.0, None)
    if t_ray.sum() > 0:
        meta["water_background_g_cm2"] = float(
            (t_ray ** 2).sum() / t_ray.sum())
    return Sinogram(data, sino.geometry, sino.bins, kind="line_integral",
                    metadata=meta)
