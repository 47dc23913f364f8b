"""Command-line pipeline: simulate, reconstruct, decompose, evaluate and
the resumable end-to-end `pipeline` command."""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import decomp, metrics, segmentation
from .artifacts import (
    load_density_maps,
    load_label_image,
    load_multi_energy,
    load_sinogram,
    save_density_maps,
    save_label_image,
    save_multi_energy,
    save_sinogram,
)
from .config import ConfigError, RunConfig, load_config, stage_seed
from .figures import (
    material_windows,
    save_comparison_figure,
    save_density_pngs,
    save_sweep_figure,
)
from .materials import (
    Spectrum,
    bin_fluence,
    calibrated_mu_matrix,
    effective_mu_matrix,
    ideal_response,
    load_material_table,
    load_spectrum,
    bundled_path,
)
from .phantom import load_phantom_spec, rasterize
from .projector import (
    Geometry,
    acquire_mean,
    log_normalize,
    poisson_sample,
    water_linearize,
)
from .recon import DivergenceError, reconstruct_all
from .segmentation import KernelParams

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

T_SWEEP = [round(0.1 * k, 1) for k in range(1, 10)]
THETA_SWEEP = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]


class Scene:
    """Deterministic per-run context derived from the configuration."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.phantom_spec = load_phantom_spec(cfg.phantom)
        self.tables = []
        for name in cfg.materials:
            path = bundled_path(f"{name}.tsv")
            if not Path(str(path)).exists():
                raise ConfigError(f"no bundled attenuation table for {name!r}")
            self.tables.append(load_material_table(path))
        raw_spectrum = load_spectrum(cfg.spectrum)
        lo = min(b[0] for b in cfg.bins)
        hi = max(b[1] for b in cfg.bins)
        e = raw_spectrum.grid.energies
        if lo < e[0] or hi > e[-1]:
            raise ConfigError(
                f"bins [{lo}, {hi}] keV exceed spectrum range [{e[0]}, {e[-1]}]"
            )
        self.response = ideal_response(raw_spectrum.grid, cfg.bins)
        blanks = bin_fluence(raw_spectrum, self.response)
        if np.any(blanks <= 0):
            raise ConfigError("spectrum carries no fluence in at least one bin")
        scale = cfg.blank_counts_per_bin / blanks.mean()
        self.spectrum = Spectrum(raw_spectrum.grid, raw_spectrum.fluence * scale)
        spec = self.phantom_spec
        self.geometry = Geometry(
            cfg.n_detectors,
            cfg.detector_spacing_cm,
            np.arange(cfg.n_views) * (2 * np.pi / cfg.n_views),
            spec.width,
            spec.height,
            spec.pixel_size_cm,
        )
        self.dmatrix = effective_mu_matrix(self.spectrum, self.response, self.tables)


def _write_dmatrix_csv(path, dmatrix):
    lines = ["bin_lo_keV,bin_hi_keV," + ",".join(dmatrix.material_names)]
    for i, (lo, hi) in enumerate(dmatrix.bins):
        row = [f"{lo:g}", f"{hi:g}"] + [
            f"{v:.6g}" for v in dmatrix.entries[i]
        ]
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n")


def cmd_simulate(cfg: RunConfig, scene: Scene | None = None):
    scene = scene or Scene(cfg)
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    gt = rasterize(scene.phantom_spec)
    save_density_maps(out / "gt_density.sctr", gt)

    mean = acquire_mean(gt, scene.spectrum, scene.response, scene.tables,
                        scene.geometry)
    save_sinogram(out / "sino_mean.sctr", mean)
    noisy = poisson_sample(mean, stage_seed(cfg.seed, "noise"))
    save_sinogram(out / "sino_noisy.sctr", noisy)
    _write_dmatrix_csv(out / "decomp_matrix.csv", scene.dmatrix)
    return out


def cmd_reconstruct(cfg: RunConfig, scene: Scene | None = None):
    scene = scene or Scene(cfg)
    out = cfg.out
    sino = load_sinogram(out / "sino_noisy.sctr")
    if sino.kind == "counts":
        sino = log_normalize(sino, scene.spectrum, scene.response)
        if cfg.linearize and "water" in cfg.materials:
            water_table = scene.tables[cfg.materials.index("water")]
            sino = water_linearize(sino, scene.spectrum, scene.response,
                                   water_table)
    y = reconstruct_all(sino, cfg.recon, threads=cfg.threads)
    if "water_background_g_cm2" in sino.metadata:
        y.metadata["water_background_g_cm2"] = (
            sino.metadata["water_background_g_cm2"])
    save_multi_energy(out / "y.sctr", y)
    with open(out / "recon_residuals.txt", "w") as fh:
        for b, r in enumerate(y.metadata.get("residuals", [])):
            fh.write(f"bin {b}: final residual {r:.6e}\n")
    return out


def _selection_report(selection, material_names):
    lines = [f"relative population threshold T = {selection.threshold:g}"]
    for k in sorted(selection.selected):
        kept = [material_names[i] for i in selection.selected[k]]
        fr = ", ".join(
            f"{material_names[a]}={selection.fractions[k][a]:.3f}"
            for a in range(len(material_names))
        )
        lines.append(f"ROI {k}: keep [{', '.join(kept)}]  fractions: {fr}")
    for k in selection.empty_rois:
        lines.append(f"ROI {k}: empty, skipped")
    return "\n".join(lines) + "\n"


def run_roi_stages(cfg, y, dmatrix, coarse_maps, theta=None, T=None,
                   precomputed_rois=None):
    """select_reference_bin -> label image -> kernel k-means -> RPT -> fine."""
    kp = cfg.kernel
    if theta is not None:
        kp = KernelParams(theta=theta, sigma2=kp.sigma2, K=kp.K, n_init=kp.n_init,
                          max_iter=kp.max_iter, seed=kp.seed,
                          direct_cap=kp.direct_cap, subsample=kp.subsample)
    if precomputed_rois is None:
        seed = stage_seed(cfg.seed, "segmentation")
        ref_bin = segmentation.select_reference_bin(y, kp.K, seed)
        ys = segmentation.build_label_image(y, ref_bin, kp.K, seed)
        kp = KernelParams(theta=kp.theta, sigma2=kp.sigma2, K=kp.K,
                          n_init=kp.n_init, max_iter=kp.max_iter, seed=seed,
                          direct_cap=kp.direct_cap, subsample=kp.subsample)
        rois = segmentation.kernel_kmeans(y, ys, kp)
    else:
        rois = precomputed_rois
    # Presence detection runs on a coarse pass of the composite image so
    # that ROI averaging suppresses spurious per-pixel detections.
    if cfg.beta > 0:
        blended = decomp.blend_toward_roi_means(y, rois, cfg.beta)
        rpt_maps = decomp.coarse_decompose(
            blended, dmatrix, cfg.admm, lam_scale=decomp.RPT_LAMBDA_SCALE)
    else:
        rpt_maps = coarse_maps
    selection = decomp.rpt_select(
        rpt_maps, rois, cfg.T if T is None else T, cfg.presence_eps
    )
    fine = decomp.fine_decompose(y, rois, selection, dmatrix, cfg.admm,
                                 beta=cfg.beta)
    return rois, selection, fine


def _decomp_matrix(scene: Scene, y):
    """Matrix used by the decomposition stages.

    When the projections were water-linearized, the trace-material columns
    are recalibrated around the scan's own attenuation-weighted water
    background so that the linear model matches what the linearized data
    actually encode; otherwise the plain bin-averaged matrix is used.
    """
    bg = y.metadata.get("water_background_g_cm2")
    if bg and "water" in scene.cfg.materials:
        return calibrated_mu_matrix(scene.spectrum, scene.response,
                                    scene.tables, float(bg))
    return scene.dmatrix


def cmd_decompose(cfg: RunConfig, scene: Scene | None = None):
    scene = scene or Scene(cfg)
    out = cfg.out
    y = load_multi_energy(out / "y.sctr")
    dmatrix = _decomp_matrix(scene, y)

    coarse_maps = None
    if "tv" in cfg.methods:
        tv_maps = decomp.tv_decompose(y, dmatrix, cfg.tv_weight, cfg.tv_max_iter)
        save_density_maps(out / "maps_tv.sctr", tv_maps)
    if "coarse" in cfg.methods or "roi" in cfg.methods:
        coarse_maps = decomp.coarse_decompose(y, dmatrix, cfg.admm)
    if "coarse" in cfg.methods:
        save_density_maps(out / "maps_coarse.sctr", coarse_maps)
    if "roi" in cfg.methods:
        rois, selection, fine = run_roi_stages(cfg, y, dmatrix, coarse_maps)
        save_label_image(out / "rois.sctr", rois)
        (out / "selection.txt").write_text(
            _selection_report(selection, dmatrix.material_names)
        )
        save_density_maps(out / "maps_roi.sctr", fine)
    return out


def _method_reports(cfg, gt, out):
    reports = []
    maps_by_method = {}
    for method in cfg.methods:
        path = out / f"maps_{method}.sctr"
        if not path.exists():
            raise ConfigError(f"missing decomposition output {path}")
        maps = load_density_maps(path)
        maps_by_method[method] = maps
        reports.append(metrics.evaluate(
            maps, gt, method, cfg.presence_eps,
            {"phantom": str(cfg.phantom), "seed": cfg.seed},
        ))
    return reports, maps_by_method


def cmd_evaluate(cfg: RunConfig, scene: Scene | None = None, sweep: str | None = None):
    scene = scene or Scene(cfg)
    out = cfg.out
    gt = load_density_maps(out / "gt_density.sctr")

    if sweep is None:
        reports, maps_by_method = _method_reports(cfg, gt, out)
        (out / "report.csv").write_text(metrics.compare_methods(reports))
        (out / "report.txt").write_text(metrics.comparison_table(reports))
        windows = material_windows(gt)
        fig_dir = out / "figures"
        for method, maps in maps_by_method.items():
            save_density_pngs(maps, windows, fig_dir, f"density_{method}")
        save_density_pngs(gt, windows, fig_dir, "density_truth")
        save_comparison_figure(maps_by_method, gt, windows,
                               fig_dir / "comparison.png")
        return out

    y = load_multi_energy(out / "y.sctr")
    dmatrix = _decomp_matrix(scene, y)
    coarse_maps = decomp.coarse_decompose(y, dmatrix, cfg.admm)
    contrast = [m for m in dmatrix.material_names if m not in ("water", "pmma")]
    rows = ["sweep,value,material,error_m"]
    errors = {mat: [] for mat in contrast}

    if sweep == "t":
        rois = (load_label_image(out / "rois.sctr")
                if (out / "rois.sctr").exists() else None)
        values = T_SWEEP
        for T in values:
            rois, _, fine = run_roi_stages(cfg, y, dmatrix, coarse_maps, T=T,
                                           precomputed_rois=rois)
            for mat in contrast:
                a = dmatrix.material_names.index(mat)
                err = metrics.normalized_euclidean(fine.maps[a], gt.maps[a])
                errors[mat].append(err)
                rows.append(f"t,{T:g},{mat},{err:.6g}")
        xlabel = "population threshold T"
        stem = "sweep_T"
    elif sweep == "theta":
        values = THETA_SWEEP
        for theta in values:
            _, _, fine = run_roi_stages(cfg, y, dmatrix, coarse_maps, theta=theta)
            for mat in contrast:
                a = dmatrix.material_names.index(mat)
                err = metrics.normalized_euclidean(fine.maps[a], gt.maps[a])
                errors[mat].append(err)
                rows.append(f"theta,{theta:g},{mat},{err:.6g}")
        xlabel = "spatial kernel weight"
        stem = "sweep_theta"
    else:
        raise ConfigError(f"unknown sweep mode {sweep!r}")

    (out / f"{stem}.csv").write_text("\n".join(rows) + "\n")
    save_sweep_figure(values, errors, xlabel, out / f"{stem}.png")
    return out


def _config_digest(cfg: RunConfig) -> str:
    payload = json.dumps({
        "phantom": str(cfg.phantom), "spectrum": str(cfg.spectrum),
        "materials": list(cfg.materials), "bins": [list(b) for b in cfg.bins],
        "n_views": cfg.n_views, "n_detectors": cfg.n_detectors,
        "detector_spacing_cm": cfg.detector_spacing_cm,
        "blank": cfg.blank_counts_per_bin, "seed": cfg.seed,
        "recon": vars(cfg.recon) | {"linearize": cfg.linearize},
        "kernel": {f: getattr(cfg.kernel, f) for f in
                   ("theta", "sigma2", "K", "n_init", "max_iter", "seed",
                    "direct_cap", "subsample")},
        "admm": {f: getattr(cfg.admm, f) for f in
                 ("lam", "rho", "max_iter", "tol_primal", "tol_dual", "nonneg")},
        "T": cfg.T, "beta": cfg.beta, "presence_eps": cfg.presence_eps,
        "tv": [cfg.tv_weight, cfg.tv_max_iter], "methods": list(cfg.methods),
    }, sort_keys=True, default=str)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


STAGE_OUTPUTS = {
    "simulate": ["gt_density.sctr", "sino_mean.sctr", "sino_noisy.sctr",
                 "decomp_matrix.csv"],
    "reconstruct": ["y.sctr"],
    "decompose": [],   # method-dependent, filled below
    "evaluate": ["report.csv"],
}


def _stage_outputs(cfg, stage):
    if stage == "decompose":
        return [f"maps_{m}.sctr" for m in cfg.methods]
    return STAGE_OUTPUTS[stage]


def cmd_pipeline(cfg: RunConfig, resume: bool = False):
    scene = Scene(cfg)
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    digest = _config_digest(cfg)
    manifest_path = out / "manifest.json"
    manifest = {}
    if manifest_path.exists():
        try:
            manifest = json.loads(manifest_path.read_text())
        except json.JSONDecodeError:
            manifest = {}
    stale = manifest.get("config_digest") != digest

    stages = [
        ("simulate", cmd_simulate),
        ("reconstruct", cmd_reconstruct),
        ("decompose", cmd_decompose),
        ("evaluate", cmd_evaluate),
    ]
    # The evaluate stage always re-executes on resume; earlier stages are
    # skipped when their outputs exist and the manifest still matches.
    executed = []
    for name, fn in stages:
        outputs = [out / p for p in _stage_outputs(cfg, name)]
        fresh = all(p.exists() for p in outputs)
        if resume and not stale and fresh and name != "evaluate":
            continue
        try:
            fn(cfg, scene)
        except ConfigError:
            raise
        except (DivergenceError, np.linalg.LinAlgError, FloatingPointError) as exc:
            raise PipelineFailure(name, str(exc)) from exc
        executed.append(name)
    manifest = {"config_digest": digest, "seed": cfg.seed,
                "stages_executed": executed}
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return executed


class PipelineFailure(RuntimeError):
    def __init__(self, stage, message):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage


def build_parser():
    parser = argparse.ArgumentParser(
        prog="spectroi",
        description="Spectral photon-counting CT simulation and ROI-wise "
                    "material decomposition",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("simulate", "reconstruct", "decompose", "evaluate", "pipeline"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="run configuration YAML")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--out", default=None)
        p.add_argument("--methods", default=None,
                       help="comma-separated subset of tv,coarse,roi")
        if name == "pipeline":
            p.add_argument("--resume", action="store_true")
        if name == "evaluate":
            p.add_argument("--sweep", choices=("t", "theta"), default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.threads is not None:
        overrides["threads"] = args.threads
    if args.out is not None:
        overrides["out"] = args.out
    if args.methods is not None:
        overrides["methods"] = [m.strip() for m in args.methods.split(",") if m.strip()]

    try:
        cfg = load_config(args.config, overrides)
        if args.command == "simulate":
            cmd_simulate(cfg)
        elif args.command == "reconstruct":
            cmd_reconstruct(cfg)
        elif args.command == "decompose":
            cmd_decompose(cfg)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, sweep=args.sweep)
        elif args.command == "pipeline":
            cmd_pipeline(cfg, resume=args.resume)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PipelineFailure, DivergenceError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
