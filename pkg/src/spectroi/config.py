"""Run configuration: YAML schema, validation and path resolution.

`bundled:<name>` path values resolve into the package data directory, so
the shipped desk-scale experiment runs without any external files.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .decomp import AdmmParams, PRESENCE_EPS
from .materials import bundled_path
from .recon import SartTvParams
from .segmentation import KernelParams

VALID_METHODS = ("tv", "coarse", "roi")


class ConfigError(ValueError):
    """Invalid or incomplete run configuration (CLI exit code 2)."""


@dataclass
class RunConfig:
    phantom: Path
    spectrum: Path
    materials: tuple
    bins: tuple
    n_views: int
    n_detectors: int
    detector_spacing_cm: float
    blank_counts_per_bin: float
    seed: int
    recon: SartTvParams
    kernel: KernelParams
    admm: AdmmParams
    T: float
    beta: float
    presence_eps: float
    tv_weight: float
    tv_max_iter: int
    methods: tuple
    out: Path
    threads: int = 1
    linearize: bool = True


def _resolve_path(value: str, base: Path) -> Path:
    if value.startswith("bundled:"):
        return Path(str(bundled_path(value[len("bundled:"):])))
    p = Path(value)
    if not p.is_absolute():
        p = base / p
    return p


def _section(doc: dict, key: str) -> dict:
    sec = doc.get(key, {})
    if sec is None:
        sec = {}
    if not isinstance(sec, dict):
        raise ConfigError(f"section {key!r} must be a mapping")
    return sec


def load_config(path, overrides: dict | None = None) -> RunConfig:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    overrides = overrides or {}
    base = path.parent

    try:
        phantom = _resolve_path(str(doc["phantom"]), base)
        spectrum = _resolve_path(str(doc["spectrum"]), base)
        materials = tuple(doc["materials"])
        bins = tuple((float(lo), float(hi)) for lo, hi in doc["bins"])
        geo = doc["geometry"]
        n_views = int(geo["n_views"])
        n_detectors = int(geo["n_detectors"])
        spacing = float(geo["detector_spacing_cm"])
    except KeyError as exc:
        raise ConfigError(f"{path}: missing required key {exc}") from exc

    for p, what in ((phantom, "phantom"), (spectrum, "spectrum")):
        if not Path(p).exists():
            raise ConfigError(f"{path}: {what} file not found: {p}")
    if len(bins) < 2:
        raise ConfigError(f"{path}: need at least 2 energy bins")

    seed = int(overrides.get("seed", doc.get("seed", 0)))
    methods = overrides.get("methods") or doc.get("methods") or list(VALID_METHODS)
    methods = tuple(methods)
    for m in methods:
        if m not in VALID_METHODS:
            raise ConfigError(f"{path}: unknown method {m!r}")

    rec = _section(doc, "recon")
    seg = _section(doc, "segmentation")
    adm = _section(doc, "admm")
    tvb = _section(doc, "tv_baseline")

    try:
        recon = SartTvParams(
            n_iterations=int(rec.get("n_iterations", 100)),
            relaxation=float(rec.get("relaxation", 1.0)),
            tv_weight=(None if rec.get("tv_weight") is None
                       else float(rec["tv_weight"])),
            tv_inner_steps=int(rec.get("tv_inner_steps", 10)),
            nonneg=bool(rec.get("nonneg", True)),
        )
        kernel = KernelParams(
            theta=float(overrides.get("theta", seg.get("theta", 0.2))),
            sigma2=float(seg.get("sigma2", 0.5)),
            K=int(seg.get("K", 6)),
            n_init=int(seg.get("n_init", 2)),
            max_iter=int(seg.get("max_iter", 50)),
            seed=seed,
            direct_cap=int(seg.get("direct_cap", 2**16)),
            subsample=int(seg.get("subsample", 2**14)),
        )
        admm = AdmmParams(
            lam=(None if adm.get("lam") is None else float(adm["lam"])),
            rho=float(adm.get("rho", 1.0)),
            max_iter=int(adm.get("max_iter", 500)),
            tol_primal=float(adm.get("tol_primal", 1e-6)),
            tol_dual=float(adm.get("tol_dual", 1e-6)),
            nonneg=bool(adm.get("nonneg", True)),
        )
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    T = float(overrides.get("T", doc.get("T", 0.4)))
    beta = float(doc.get("beta", 0.5))
    if not 0.0 <= T <= 1.0 or not 0.0 <= beta <= 1.0:
        raise ConfigError(f"{path}: T and beta must lie in [0, 1]")

    return RunConfig(
        phantom=phantom,
        spectrum=spectrum,
        materials=materials,
        bins=bins,
        n_views=n_views,
        n_detectors=n_detectors,
        detector_spacing_cm=spacing,
        blank_counts_per_bin=float(doc.get("blank_counts_per_bin", 1e4)),
        seed=seed,
        recon=recon,
        kernel=kernel,
        admm=admm,
        T=T,
        beta=beta,
        presence_eps=float(doc.get("presence_eps_mg_cc", 0.1)) / 1000.0,
        tv_weight=float(tvb.get("tv_weight", 1e-3)),
        tv_max_iter=int(tvb.get("max_iter", 100)),
        methods=methods,
        out=Path(overrides.get("out", doc.get("out", "runs/out"))),
        threads=int(overrides.get("threads", doc.get("threads", 1))),
        linearize=bool(rec.get("water_linearize", True)),
    )


def stage_seed(seed: int, stage: str) -> int:
    """Stage-labeled seed derivation so stages are independently reproducible."""
    import zlib

    return (seed * 1_000_003 + zlib.crc32(stage.encode())) % 2**31
