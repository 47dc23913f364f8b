"""Generate the bundled attenuation tables and the default source spectrum.

Anchor values are NIST mass attenuation coefficients (cm^2/g); the fine
tables are produced by log-log interpolation onto a shared 0.5 keV grid
with duplicated rows at the iodine and gadolinium K-edges.  Run once and
commit the TSV outputs; the package never regenerates them at runtime.
"""

import numpy as np
from pathlib import Path

OUT = Path(__file__).resolve().parents[1] / "src" / "spectroi" / "data"

I_KEDGE = 33.1694
GD_KEDGE = 50.2391

# (energy keV, mu/rho cm^2/g) anchors; duplicated energies mark K-edges.
ANCHORS = {
    "water": [
        (10, 5.329), (15, 1.673), (20, 0.8096), (30, 0.3756), (40, 0.2683),
        (50, 0.2269), (60, 0.2059), (80, 0.1837), (100, 0.1707), (150, 0.1505),
    ],
    "pmma": [
        (10, 3.357), (15, 1.101), (20, 0.5714), (30, 0.3032), (40, 0.2350),
        (50, 0.2074), (60, 0.1924), (80, 0.1751), (100, 0.1641), (150, 0.1456),
    ],
    "iron": [
        (10, 170.6), (15, 57.08), (20, 25.68), (30, 8.176), (40, 3.629),
        (50, 1.958), (60, 1.205), (80, 0.5952), (100, 0.3717), (150, 0.1964),
    ],
    "iodine": [
        (10, 162.0), (15, 55.46), (20, 25.23), (25, 13.97), (30, 8.561),
        (I_KEDGE, 6.553), (I_KEDGE, 36.59), (40, 22.10), (50, 12.32),
        (60, 7.579), (80, 3.510), (100, 1.942), (150, 0.6978),
    ],
    "gadolinium": [
        (10, 225.0), (15, 133.0), (20, 58.10), (30, 17.90), (40, 7.800),
        (GD_KEDGE, 4.028), (GD_KEDGE, 18.93), (60, 11.34), (80, 4.900),
        (100, 2.560), (150, 0.880),
    ],
}

DENSITIES = {
    "water": 1.000,
    "pmma": 1.190,
    "iron": 7.874,
    "iodine": 4.933,
    "gadolinium": 7.900,
}

ALUMINUM = [
    (10, 26.23), (15, 7.955), (20, 3.441), (30, 1.128), (40, 0.5685),
    (50, 0.3681), (60, 0.2778), (80, 0.2018), (100, 0.1704), (150, 0.1378),
]

COPPER = [
    (10, 215.9), (15, 74.05), (20, 33.79), (30, 10.92), (40, 4.862),
    (50, 2.613), (60, 1.593), (80, 0.763), (100, 0.458), (150, 0.2217),
]

EDGE_NUDGE = 1e-6  # keV; separates the two sides of a K-edge pair


def _monotone(e):
    e = np.asarray(e, dtype=float).copy()
    for i in range(1, len(e)):
        if e[i] <= e[i - 1]:
            e[i] = e[i - 1] + EDGE_NUDGE
    return e


def loglog_sample(anchors, grid):
    e = _monotone([a[0] for a in anchors])
    v = np.array([a[1] for a in anchors])
    return np.exp(np.interp(np.log(grid), np.log(e), np.log(v)))


def shared_grid():
    base = np.round(np.arange(20.0, 100.0 + 1e-9, 0.5), 4)
    edges = [I_KEDGE, I_KEDGE + EDGE_NUDGE, GD_KEDGE, GD_KEDGE + EDGE_NUDGE]
    return np.sort(np.concatenate([base, edges]))


def write_table(name, anchors, density):
    grid = shared_grid()
    mu = loglog_sample(anchors, grid)
    lines = [f"# material: {name}", f"# density_g_cm3: {density}"]
    for e, m in zip(grid, mu):
        lines.append(f"{e:.7f}\t{m:.6e}")
    (OUT / f"{name}.tsv").write_text("\n".join(lines) + "\n")


def write_spectrum():
    # Kramers bremsstrahlung at 90 kVp filtered by 2.5 mm aluminum and
    # 0.2 mm copper, which keeps the five 30-80 keV bins within about a
    # factor two of the mean blank count.
    grid = shared_grid()
    grid = grid[(grid >= 20.0) & (grid <= 90.0)]
    kvp = 90.0
    mu_al = loglog_sample(ALUMINUM, grid) * 2.699  # 1/cm
    mu_cu = loglog_sample(COPPER, grid) * 8.96
    fl = np.maximum(kvp - grid, 0.0) / grid * np.exp(-mu_al * 0.25 - mu_cu * 0.02)
    fl /= fl.max()
    lines = ["# spectrum: tungsten_90kvp_2p5mmAl_0p2mmCu"]
    for e, f in zip(grid, fl):
        lines.append(f"{e:.7f}\t{f:.6e}")
    (OUT / "spectrum_90kvp.tsv").write_text("\n".join(lines) + "\n")


if __name__ == "__main__":
    for name, anchors in ANCHORS.items():
        write_table(name, anchors, DENSITIES[name])
    write_spectrum()
    print("wrote", sorted(p.name for p in OUT.glob("*.tsv")))
