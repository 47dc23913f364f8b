"""X-ray attenuation physics: energy grids, spectra, detector response,
mass-attenuation tables and the effective decomposition matrix.

All quantities are in keV, cm^2/g, 1/cm and g/cm^3.  Attenuation tables
store duplicated energies at absorption edges; the loader nudges the
second of each pair up by a micro-eV so every grid is strictly increasing
and interpolation stays well defined while the edge jump is preserved to
within negligible quadrature measure.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass, field

import numpy as np

EDGE_NUDGE_KEV = 1e-6

BUNDLED_MATERIALS = ("water", "pmma", "iron", "iodine", "gadolinium")


@dataclass(frozen=True)
class EnergyGrid:
    """Strictly increasing photon energies in keV."""

    energies: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.energies, dtype=float)
        object.__setattr__(self, "energies", e)
        if e.ndim != 1 or e.size < 2:
            raise ValueError("energy grid needs at least 2 points")
        if not np.all(np.diff(e) > 0):
            raise ValueError("energy grid must be strictly increasing")
        if not np.all(e > 0):
            raise ValueError("energies must be positive")

    def __len__(self):
        return self.energies.size


@dataclass(frozen=True)
class Spectrum:
    """Photon fluence per energy sample on a grid (photons per ray)."""

    grid: EnergyGrid
    fluence: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.fluence, dtype=float)
        object.__setattr__(self, "fluence", f)
        if f.shape != self.grid.energies.shape:
            raise ValueError("fluence length must match grid length")
        if np.any(f < 0):
            raise ValueError("fluence must be non-negative")
        if f.sum() <= 0:
            raise ValueError("total fluence must be positive")

    def scaled(self, factor: float) -> "Spectrum":
        return Spectrum(self.grid, self.fluence * factor)


@dataclass(frozen=True)
class DetectorResponse:
    """Energy-bin intervals [lo, hi) and per-bin sensitivity on a grid."""

    grid: EnergyGrid
    bins: tuple
    sensitivity: np.ndarray

    def __post_init__(self):
        bins = tuple((float(lo), float(hi)) for lo, hi in self.bins)
        object.__setattr__(self, "bins", bins)
        s = np.asarray(self.sensitivity, dtype=float)
        object.__setattr__(self, "sensitivity", s)
        for lo, hi in bins:
            if hi <= lo:
                raise ValueError("bin upper edge must exceed lower edge")
        for (a_lo, a_hi), (b_lo, b_hi) in zip(bins, bins[1:]):
            if b_lo < a_hi:
                raise ValueError("bins must be ordered and non-overlapping")
        if s.shape != (len(bins), len(self.grid)):
            raise ValueError("sensitivity must be B x |grid|")
        if np.any(s < 0) or np.any(s > 1):
            raise ValueError("sensitivity entries must lie in [0, 1]")

    @property
    def n_bins(self) -> int:
        return len(self.bins)


def ideal_response(grid: EnergyGrid, bins) -> DetectorResponse:
    """Unit sensitivity inside each bin interval, zero outside."""
    e = grid.energies
    sens = np.stack([((e >= lo) & (e < hi)).astype(float) for lo, hi in bins])
    return DetectorResponse(grid, tuple(bins), sens)


@dataclass(frozen=True)
class MaterialTable:
    """Tabulated mass attenuation coefficients for one material."""

    name: str
    grid: EnergyGrid
    mass_atten: np.ndarray
    reference_density: float = 1.0

    def __post_init__(self):
        m = np.asarray(self.mass_atten, dtype=float)
        object.__setattr__(self, "mass_atten", m)
        if m.shape != self.grid.energies.shape:
            raise ValueError("mass_atten length must match grid length")
        if not np.all(np.isfinite(m)) or np.any(m <= 0):
            raise ValueError("mass attenuation values must be finite and positive")


@dataclass(frozen=True)
class DecompMatrix:
    """Effective mass attenuation coefficients, one column per material."""

    entries: np.ndarray
    material_names: tuple
    bins: tuple

    def __post_init__(self):
        m = np.asarray(self.entries, dtype=float)
        object.__setattr__(self, "entries", m)
        object.__setattr__(self, "material_names", tuple(self.material_names))
        object.__setattr__(self, "bins", tuple(self.bins))
        if m.shape != (len(self.bins), len(self.material_names)):
            raise ValueError("entries must be B x M")
        if np.any(m <= 0):
            raise ValueError("effective coefficients must be positive")


def _parse_two_column(text: str, path_label: str):
    header = {}
    energies = []
    values = []
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line.lstrip("#").strip()
            if ":" in body:
                key, val = body.split(":", 1)
                header[key.strip()] = val.strip()
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"{path_label}:{ln}: expected two columns")
        try:
            energies.append(float(parts[0]))
            values.append(float(parts[1]))
        except ValueError as exc:
            raise ValueError(f"{path_label}:{ln}: unparsable number") from exc
    return header, np.array(energies), np.array(values)


def _nudge_duplicates(energies: np.ndarray) -> np.ndarray:
    e = energies.copy()
    for i in range(1, e.size):
        if e[i] <= e[i - 1]:
            if e[i] < e[i - 1]:
                raise ValueError("energies must be non-decreasing")
            e[i] = e[i - 1] + EDGE_NUDGE_KEV
    return e


def load_material_table(path) -> MaterialTable:
    """Load a two-column (keV, cm^2/g) attenuation table."""
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    header, energies, values = _parse_two_column(text, str(path))
    name = header.get("material", "unknown")
    density = float(header.get("density_g_cm3", 1.0))
    if energies.size < 2:
        raise ValueError(f"{path}: table needs at least 2 energy points")
    if np.any(values <= 0):
        raise ValueError(f"{path}: mass attenuation must be positive")
    energies = _nudge_duplicates(energies)
    return MaterialTable(name, EnergyGrid(energies), values, density)


def load_spectrum(path) -> Spectrum:
    """Load a two-column (keV, fluence) spectrum file."""
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    _, energies, values = _parse_two_column(text, str(path))
    if energies.size < 2:
        raise ValueError(f"{path}: spectrum needs at least 2 energy points")
    return Spectrum(EnergyGrid(_nudge_duplicates(energies)), values)


def bundled_path(filename: str):
    return importlib.resources.files("spectroi.data") / filename


def load_bundled_material(name: str) -> MaterialTable:
    return load_material_table(bundled_path(f"{name}.tsv"))


def load_bundled_spectrum(name: str = "spectrum_90kvp") -> Spectrum:
    return load_spectrum(bundled_path(f"{name}.tsv"))


def interpolate_mu(table: MaterialTable, energy) -> np.ndarray:
    """Log-log linear interpolation of mass attenuation; exact at samples."""
    e = np.asarray(energy, dtype=float)
    grid = table.grid.energies
    if np.any(e < grid[0]) or np.any(e > grid[-1]):
        raise ValueError(
            f"energy out of table range [{grid[0]:g}, {grid[-1]:g}] for "
            f"{table.name}"
        )
    out = np.exp(np.interp(np.log(e), np.log(grid), np.log(table.mass_atten)))
    return out if out.shape else float(out)


def _bin_mask(energies: np.ndarray, lo: float, hi: float) -> np.ndarray:
    # Closed interval for quadrature; the shared-edge point carries
    # vanishing measure for the neighbouring bin.
    return (energies >= lo) & (energies <= hi)


def bin_fluence(spectrum: Spectrum, response: DetectorResponse) -> np.ndarray:
    """Blank-scan photon count per bin: integral of n0(E) d_i(E) dE."""
    if spectrum.grid.energies.shape != response.grid.energies.shape or not np.allclose(
        spectrum.grid.energies, response.grid.energies
    ):
        raise ValueError("spectrum and response must share one energy grid")
    e = spectrum.grid.energies
    counts = np.empty(response.n_bins)
    for i, (lo, hi) in enumerate(response.bins):
        m = _bin_mask(e, lo, hi)
        if m.sum() < 2:
            counts[i] = 0.0
            continue
        w = spectrum.fluence[m] * response.sensitivity[i][m]
        counts[i] = np.trapezoid(w, e[m])
    return counts


def effective_mu_matrix(
    spectrum: Spectrum, response: DetectorResponse, tables
) -> DecompMatrix:
    """Fluence-weighted bin average of each material's mass attenuation."""
    e = spectrum.grid.energies
    blanks = bin_fluence(spectrum, response)
    if np.any(blanks <= 0):
        bad = [response.bins[i] for i in np.flatnonzero(blanks <= 0)]
        raise ValueError(f"zero total fluence in bins {bad}")
    entries = np.empty((response.n_bins, len(tables)))
    for a, table in enumerate(tables):
        mu = interpolate_mu(table, e)
        for i, (lo, hi) in enumerate(response.bins):
            m = _bin_mask(e, lo, hi)
            w = spectrum.fluence[m] * response.sensitivity[i][m]
            entries[i, a] = np.trapezoid(w * mu[m], e[m]) / blanks[i]
    return DecompMatrix(entries, [t.name for t in tables], response.bins)


def calibrated_mu_matrix(
    spectrum: Spectrum,
    response: DetectorResponse,
    tables,
    background_g_cm2: float,
    water_name: str = "water",
    probe_g_cm2: float = 0.02,
    t_max: float = 100.0,
    n_samples: int = 2048,
) -> DecompMatrix:
    """Decomposition matrix linearized around a thick water background.

    The plain bin average treats the in-bin spectrum as fixed, but a long
    water path hardens each bin before the beam reaches an insert, and a
    material with an absorption edge inside a bin (iodine, K edge at
    33.2 keV) attenuates the hardened spectrum measurably differently
    from the unfiltered one.  A linear fit of water-linearized data
    therefore observes, for each trace material, the finite-difference
    response of the linearized log measurement to a thin probe of that
    material on top of a representative water path.  Each non-water
    column here is that secant; the water column is the fluence-weighted
    bin average, which the water linearization makes exact at every
    thickness.
    """
    names = [t.name for t in tables]
    if water_name not in names:
        raise ValueError(f"no table named {water_name!r} for the background")
    if background_g_cm2 < 0 or probe_g_cm2 <= 0:
        raise ValueError("background must be >= 0 and probe > 0")
    e = spectrum.grid.energies
    mus = np.array([interpolate_mu(t, e) for t in tables])
    w = spectrum.fluence[None, :] * response.sensitivity
    blanks = np.trapezoid(w, e, axis=1)
    if np.any(blanks <= 0):
        bad = [response.bins[i] for i in np.flatnonzero(blanks <= 0)]
        raise ValueError(f"zero total fluence in bins {bad}")
    wi = names.index(water_name)
    mu_w = mus[wi]
    tgrid = np.linspace(-5.0, t_max, n_samples)
    trans = np.exp(-np.outer(tgrid, mu_w))
    p_of_t = -np.log(
        np.trapezoid(w[None, :, :] * trans[:, None, :], e, axis=2) / blanks
    )
    mu_eff_w = np.trapezoid(w * mu_w[None, :], e, axis=1) / blanks

    def linearized(path):
        att = np.exp(-(mus * path[:, None]).sum(axis=0))
        p = -np.log(np.trapezoid(w * att[None, :], e, axis=1) / blanks)
        t = np.array([
            np.interp(p[b], p_of_t[:, b], tgrid)
            for b in range(response.n_bins)
        ])
        return mu_eff_w * t

    base_path = np.zeros(len(tables))
    base_path[wi] = background_g_cm2
    base = linearized(base_path)
    entries = np.empty((response.n_bins, len(tables)))
    entries[:, wi] = mu_eff_w
    for a in range(len(tables)):
        if a == wi:
            continue
        path = base_path.copy()
        path[a] = probe_g_cm2
        entries[:, a] = (linearized(path) - base) / probe_g_cm2
    return DecompMatrix(entries, names, response.bins)
