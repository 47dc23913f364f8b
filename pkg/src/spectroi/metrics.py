"""Quantitative evaluation: normalized Euclidean distance per material,
FP/FN detection rates and cross-method comparison tables."""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .decomp import PRESENCE_EPS
from .phantom import DensityMaps

CSV_HEADER = "method,material,error_m,fp,fn"


@dataclass
class EvalReport:
    method: str
    materials: tuple
    error_m: dict               # material -> float
    fp: dict                    # material -> rate in [0, 1]
    fn: dict
    metadata: dict = field(default_factory=dict)


def normalized_euclidean(x_m: np.ndarray, x_gt: np.ndarray) -> float:
    """||x - x_gt||_2 / ||x_gt||_2 over the full raster."""
    x_m = np.asarray(x_m, dtype=float)
    x_gt = np.asarray(x_gt, dtype=float)
    if x_m.shape != x_gt.shape:
        raise ValueError("shape mismatch")
    denom = np.linalg.norm(x_gt)
    if denom == 0:
        raise ValueError("ground truth norm is zero")
    return float(np.linalg.norm(x_m - x_gt) / denom)


def fp_fn_rates(x: DensityMaps, x_gt: DensityMaps,
                presence_eps: float = PRESENCE_EPS) -> dict:
    """Per-material (FP, FN) over the ground-truth object region.

    The denominator is the set of pixels where any ground-truth material
    is present, so rates are comparable across methods.
    """
    if x.maps.shape != x_gt.maps.shape:
        raise ValueError("shape mismatch")
    region = np.any(x_gt.maps > 0, axis=0)
    n_region = int(region.sum())
    if n_region == 0:
        raise ValueError("empty evaluation region")
    rates = {}
    for a, mat in enumerate(x.material_names):
        detected = x.maps[a] > presence_eps
        truth = x_gt.maps[a] > 0
        n_fp = int((detected & ~truth & region).sum())
        n_fn = int((~detected & truth & region).sum())
        rates[mat] = (n_fp / n_region, n_fn / n_region)
    return rates


def evaluate(x: DensityMaps, x_gt: DensityMaps, method: str,
             presence_eps: float = PRESENCE_EPS,
             metadata: dict | None = None) -> EvalReport:
    errors = {}
    for a, mat in enumerate(x.material_names):
        if np.linalg.norm(x_gt.maps[a]) == 0:
            continue
        errors[mat] = normalized_euclidean(x.maps[a], x_gt.maps[a])
    rates = fp_fn_rates(x, x_gt, presence_eps)
    fp = {mat: r[0] for mat, r in rates.items()}
    fn = {mat: r[1] for mat, r in rates.items()}
    return EvalReport(method, tuple(x.material_names), errors, fp, fn,
                      metadata or {})


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def compare_methods(reports) -> str:
    """Aligned CSV across methods; rows are (method, material)."""
    if not reports:
        raise ValueError("no reports to compare")
    meta_keys = ("phantom", "seed")
    ref = {k: reports[0].metadata.get(k) for k in meta_keys}
    for rep in reports[1:]:
        for k in meta_keys:
            if rep.metadata.get(k) != ref[k]:
                raise ValueError(
                    f"mismatched metadata {k!r}: {rep.metadata.get(k)} vs {ref[k]}"
                )
    buf = io.StringIO()
    buf.write(CSV_HEADER + "\n")
    for rep in reports:
        for mat in rep.materials:
            if mat not in rep.error_m:
                continue
            buf.write(",".join([
                rep.method, mat,
                _fmt(rep.error_m[mat]), _fmt(rep.fp[mat]), _fmt(rep.fn[mat]),
            ]) + "\n")
    return buf.getvalue()


def comparison_table(reports) -> str:
    """Human-readable table, one column per method."""
    methods = [r.method for r in reports]
    mats = reports[0].materials
    lines = []
    for metric in ("error_m", "fp", "fn"):
        lines.append(f"{metric}:")
        header = f"  {'material':<12}" + "".join(f"{m:>10}" for m in methods)
        lines.append(header)
        for mat in mats:
            vals = []
            for rep in reports:
                v = getattr(rep, metric).get(mat)
                vals.append(f"{v:>10.4f}" if v is not None else f"{'-':>10}")
            lines.append(f"  {mat:<12}" + "".join(vals))
    return "\n".join(lines) + "\n"
