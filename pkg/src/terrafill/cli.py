"""Batch front end: the full hole-filling pipeline and its single stages.

Stages communicate exclusively through files with fixed names inside the
output directory, and the full pipeline is implemented as the sequence of
those same stage functions. Running the stages one by one therefore
reproduces a monolithic run bit for bit, and every intermediate artifact is
inspectable on disk.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bspline import FitConfig, fit_surface, read_surface, write_surface
from .cloudio import read_cloud, write_cloud
from .errors import InvalidParameter, StageFailure, TerrafillError
from .heightfield import (
    choose_resolution,
    estimate_density,
    project_cloud,
    rasterize,
    read_heightfield,
    write_heightfield,
    write_pgm_preview,
)
from .inpaint2d import (
    InpaintConfig,
    _divergence,
    aggregate_gradients,
    compute_gradients,
    dump_nnf,
    patch_match,
    solve_poisson,
)
from .metrics import (
    SATURATED,
    compute_report,
    write_error_map,
    write_report,
    write_report_csv,
)
from .pointcloud import concat_clouds, voxel_downsample
from .reconstruct import fill_holes

__all__ = [
    "ARTIFACTS",
    "PipelineConfig",
    "RunReport",
    "main",
    "run_pipeline",
    "run_stage",
    "stage_decompose",
    "stage_downsample",
    "stage_fit",
    "stage_inpaint",
    "stage_metrics",
    "stage_reconstruct",
]

logger = logging.getLogger(__name__)

# fixed artifact names inside the output directory
ARTIFACTS = {
    "downsampled": "downsampled.ply",
    "surface": "surface.txt",
    "height_before": "height_before.hf01",
    "height_after": "height_after.hf01",
    "height_before_pgm": "height_before.pgm",
    "height_after_pgm": "height_after.pgm",
    "nnf": "nnf.txt",
    "new_points": "new_points.ply",
    "merged": "merged.ply",
    "run_report": "run_report.json",
    "report": "report.txt",
    "report_csv": "report.csv",
    "error_map": "error_map.txt",
}

STAGES = ("downsample", "fit", "decompose", "inpaint", "reconstruct", "metrics")


@dataclass(frozen=True)
class PipelineConfig:
    """Every tunable of the pipeline in one validated bundle.

    Surface-fit settings mirror FitConfig (``fit_iterations`` maps to its
    ``iterations``), inpainting settings mirror InpaintConfig
    (``pm_iterations`` maps to its ``iterations``); both are validated here
    by constructing them once.
    """

    input_path: str = ""
    output_dir: str = "."
    m: int = 19
    n: int = 19
    degree: int = 3
    fit_iterations: int = 10
    regularization_weight: float | None = None
    patch_size: int = 11
    pm_iterations: int = 10
    solver_tol: float = 1e-10
    solver_max_iter: int = 10_000
    rng_seed: int = 0
    voxel_ratio: float = 0.05
    k_normals: int = 16
    epsilon: float = 1e-3
    r_max: int = 4096
    density_factor: float = 1.0
    dump_intermediates: bool = False

    def __post_init__(self):
        object.__setattr__(self, "input_path", str(self.input_path))
        object.__setattr__(self, "output_dir", str(self.output_dir))
        self.fit_config()
        self.inpaint_config()
        if not (0.0 < self.voxel_ratio <= 1.0):
            raise InvalidParameter(
                f"voxel_ratio must be in (0, 1], got {self.voxel_ratio}"
            )
        if self.k_normals < 3:
            raise InvalidParameter(f"k_normals must be >= 3, got {self.k_normals}")
        if not self.epsilon > 0.0:
            raise InvalidParameter(f"epsilon must be > 0, got {self.epsilon}")
        if self.r_max < 2:
            raise InvalidParameter(f"r_max must be >= 2, got {self.r_max}")
        if not self.density_factor >= 0.0:
            raise InvalidParameter(
                f"density_factor must be >= 0, got {self.density_factor}"
            )

    def fit_config(self) -> FitConfig:
        return FitConfig(
            m=self.m,
            n=self.n,
            degree=self.degree,
            iterations=self.fit_iterations,
            regularization_weight=self.regularization_weight,
        )

    def inpaint_config(self) -> InpaintConfig:
        return InpaintConfig(
            patch_size=self.patch_size,
            iterations=self.pm_iterations,
            rng_seed=self.rng_seed,
            solver_tol=self.solver_tol,
            solver_max_iter=self.solver_max_iter,
        )

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def artifact(self, key: str) -> Path:
        return Path(self.output_dir) / ARTIFACTS[key]


@dataclass
class RunReport:
    """Audit record of one run: config echo, timings and stage statistics.

    Written as JSON at the end of every run, including failed ones, where
    ``failed_stage``/``error`` say what broke and the other fields keep
    whatever the finished stages produced.
    """

    config: dict
    stage_seconds: dict = field(default_factory=dict)
    input_points: int | None = None
    downsampled_points: int | None = None
    fit_objectives: list = field(default_factory=list)
    projection_valid: int | None = None
    projection_invalid: int | None = None
    raster_resolution: int | None = None
    hole_cells: int | None = None
    solver_residual: float | None = None
    new_points: int | None = None
    output_points: int | None = None
    failed_stage: str | None = None
    error: str | None = None

    def write(self, path) -> None:
        with open(path, "w", encoding="ascii") as fh:
            json.dump(dataclasses.asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")


def stage_downsample(cfg: PipelineConfig) -> dict:
    """input cloud -> voxel centroids -> downsampled.ply"""
    cloud = read_cloud(cfg.input_path)
    coarse = voxel_downsample(cloud, cfg.voxel_ratio)
    write_cloud(cfg.artifact("downsampled"), coarse)
    return {"downsampled_points": len(coarse)}


def stage_fit(cfg: PipelineConfig, cloud_path=None) -> dict:
    """downsampled.ply -> fitted B-spline -> surface.txt"""
    cloud = read_cloud(cloud_path or cfg.artifact("downsampled"))
    result = fit_surface(cloud, cfg.fit_config())
    write_surface(cfg.artifact("surface"), result.surface)
    return {"fit_objectives": [o.total for o in result.objectives]}


def stage_decompose(cfg: PipelineConfig, surface_path=None) -> dict:
    """input cloud + surface.txt -> signed heights -> height_before.hf01"""
    cloud = read_cloud(cfg.input_path)
    s = read_surface(surface_path or cfg.artifact("surface"))
    projections = project_cloud(
        cloud, s, k_normals=cfg.k_normals, epsilon=cfg.epsilon
    )
    rho = estimate_density(projections.params)
    r = choose_resolution(rho, r_max=cfg.r_max)
    h = rasterize(projections, r, density=rho)
    write_heightfield(cfg.artifact("height_before"), h)
    if cfg.dump_intermediates:
        write_pgm_preview(cfg.artifact("height_before_pgm"), h)
    return {
        "projection_valid": len(projections.params),
        "projection_invalid": len(projections.invalid_indices),
        "raster_resolution": r,
        "hole_cells": h.n_holes,
    }


def _poisson_residual(h_before, filled, g) -> float:
    """Largest 5-point-stencil defect of the filled map over the hole cells."""
    values = filled.values
    r = filled.resolution
    neighbor_count = np.full((r, r), 4.0)
    neighbor_count[0, :] -= 1.0
    neighbor_count[-1, :] -= 1.0
    neighbor_count[:, 0] -= 1.0
    neighbor_count[:, -1] -= 1.0
    acc = np.zeros((r, r))
    acc[1:, :] += values[:-1, :]
    acc[:-1, :] += values[1:, :]
    acc[:, 1:] += values[:, :-1]
    acc[:, :-1] += values[:, 1:]
    laplacian = acc - neighbor_count * values
    defect = np.abs(laplacian - _divergence(g))[h_before.hole_mask]
    return float(defect.max())


def stage_inpaint(cfg: PipelineConfig, height_path=None) -> dict:
    """height_before.hf01 -> match/vote/solve -> height_after.hf01

    Mirrors ``inpaint2d.inpaint`` (two match-and-vote passes, then the
    Poisson solve) but keeps the final correspondences and guidance so it
    can dump the NNF table and report the solver residual.
    """
    h = read_heightfield(height_path or cfg.artifact("height_before"))
    icfg = cfg.inpaint_config()
    nnf = None
    residual = 0.0
    if h.n_holes == 0:
        filled = h
    else:
        guidance = compute_gradients(h)
        for em_round in range(2):
            round_cfg = dataclasses.replace(
                icfg, rng_seed=icfg.rng_seed + em_round
            )
            nnf = patch_match(h, guidance, round_cfg)
            guidance = aggregate_gradients(nnf, guidance, round_cfg)
        filled = solve_poisson(h, guidance, icfg.solver_tol, icfg.solver_max_iter)
        residual = _poisson_residual(h, filled, guidance)
    write_heightfield(cfg.artifact("height_after"), filled)
    if cfg.dump_intermediates:
        write_pgm_preview(cfg.artifact("height_after_pgm"), filled)
        if nnf is not None:
            dump_nnf(cfg.artifact("nnf"), nnf)
    return {"hole_cells": h.n_holes, "solver_residual": residual}


def stage_reconstruct(
    cfg: PipelineConfig,
    surface_path=None,
    height_before_path=None,
    height_after_path=None,
) -> dict:
    """surface + both height maps -> new points; merge with the input cloud."""
    s = read_surface(surface_path or cfg.artifact("surface"))
    h_before = read_heightfield(height_before_path or cfg.artifact("height_before"))
    h_after = read_heightfield(height_after_path or cfg.artifact("height_after"))
    new_cloud = fill_holes(s, h_before, h_after, cfg.density_factor)
    write_cloud(cfg.artifact("new_points"), new_cloud)
    original = read_cloud(cfg.input_path)
    merged = concat_clouds(original, new_cloud)
    flags = np.concatenate(
        [
            np.zeros(len(original), dtype=np.uint8),
            np.ones(len(new_cloud), dtype=np.uint8),
        ]
    )
    write_cloud(cfg.artifact("merged"), merged, flags=flags)
    return {"new_points": len(new_cloud), "output_points": len(merged)}


def stage_metrics(
    cfg: PipelineConfig,
    truth_path,
    surface_path=None,
    height_a_path=None,
    height_b_path=None,
) -> dict:
    """result cloud vs reference cloud -> report.txt / report.csv / error_map.txt"""
    result = read_cloud(cfg.input_path)
    truth = read_cloud(truth_path)
    surface = read_surface(surface_path) if surface_path else None
    height_a = read_heightfield(height_a_path) if height_a_path else None
    height_b = read_heightfield(height_b_path) if height_b_path else None
    report = compute_report(
        result,
        truth,
        surface=surface,
        height_a=height_a,
        height_b=height_b,
        k_normals=cfg.k_normals,
    )
    write_report(cfg.artifact("report"), report)
    write_report_csv(cfg.artifact("report_csv"), report)
    write_error_map(cfg.artifact("error_map"), result, report.error_map)
    return {
        "gpsnr_db": float("inf") if report.gpsnr_db is SATURATED
        else report.gpsnr_db,
        "nshd": report.nshd,
        "nrmse": report.nrmse,
        "rmse": report.rmse,
    }


def run_stage(stage: str, cfg: PipelineConfig, **paths) -> dict:
    """Execute one named stage from its serialized inputs.

    ``paths`` may override the default artifact locations: ``cloud_path``
    (fit), ``surface_path`` (decompose/reconstruct/metrics), ``height_path``
    (inpaint), ``height_before_path``/``height_after_path`` (reconstruct),
    ``truth_path``/``height_a_path``/``height_b_path`` (metrics).
    """
    Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
    if stage == "downsample":
        return stage_downsample(cfg)
    if stage == "fit":
        return stage_fit(cfg, cloud_path=paths.get("cloud_path"))
    if stage == "decompose":
        return stage_decompose(cfg, surface_path=paths.get("surface_path"))
    if stage == "inpaint":
        return stage_inpaint(cfg, height_path=paths.get("height_path"))
    if stage == "reconstruct":
        return stage_reconstruct(
            cfg,
            surface_path=paths.get("surface_path"),
            height_before_path=paths.get("height_before_path"),
            height_after_path=paths.get("height_after_path"),
        )
    if stage == "metrics":
        truth = paths.get("truth_path")
        if not truth:
            raise InvalidParameter("metrics stage needs truth_path")
        return stage_metrics(
            cfg,
            truth,
            surface_path=paths.get("surface_path"),
            height_a_path=paths.get("height_a_path"),
            height_b_path=paths.get("height_b_path"),
        )
    raise InvalidParameter(f"unknown stage '{stage}' (expected one of {STAGES})")


def run_pipeline(cfg: PipelineConfig) -> RunReport:
    """Chain all stages through the output directory and write the report.

    On a stage error the partial report (with ``failed_stage`` filled in) is
    still written before a StageFailure is raised.
    """
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    for key, value in sorted(cfg.as_dict().items()):
        logger.info("config %s=%s", key, value)
    report = RunReport(config=cfg.as_dict())

    def read_input():
        return {"input_points": len(read_cloud(cfg.input_path))}

    steps = (
        ("read", read_input),
        ("downsample", lambda: stage_downsample(cfg)),
        ("fit", lambda: stage_fit(cfg)),
        ("decompose", lambda: stage_decompose(cfg)),
        ("inpaint", lambda: stage_inpaint(cfg)),
        ("reconstruct", lambda: stage_reconstruct(cfg)),
    )
    for name, step in steps:
        start = time.perf_counter()
        try:
            stats = step()
        except Exception as exc:
            report.stage_seconds[name] = time.perf_counter() - start
            report.failed_stage = name
            report.error = f"{type(exc).__name__}: {exc}"
            report.write(cfg.artifact("run_report"))
            raise StageFailure(name, exc) from exc
        report.stage_seconds[name] = time.perf_counter() - start
        for key, value in stats.items():
            if not hasattr(report, key):
                raise AttributeError(f"unknown report field '{key}'")
            setattr(report, key, value)
        logger.info(
            "stage %s: %.3fs %s", name, report.stage_seconds[name], stats
        )
    report.write(cfg.artifact("run_report"))
    return report


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(PipelineConfig)}


def _coerce(name: str, text: str):
    """Parse one config-file value by the type of its PipelineConfig field."""
    kind = _FIELD_TYPES[name]
    if text.lower() in ("none", "null") and "None" in kind:
        return None
    if kind.startswith("bool"):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise InvalidParameter(f"config key {name}: not a boolean: {text!r}")
    if kind.startswith("int"):
        return int(text)
    if kind.startswith("float"):
        return float(text)
    return text


def _read_config_file(path) -> dict:
    """key=value lines; blank lines and #-comments are skipped."""
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InvalidParameter(
                    f"{path}:{lineno}: expected key=value, got {line!r}"
                )
            key, text = (part.strip() for part in line.split("=", 1))
            if key not in _FIELD_TYPES:
                raise InvalidParameter(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = _coerce(key, text)
    return values


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="terrafill",
        description="Fill holes in terrain point clouds by surface fitting "
        "plus height-map inpainting.",
    )
    parser.add_argument("--verbose", action="store_true",
                        help="debug-level logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--input", help="input point cloud (.xyz or .ply)")
        p.add_argument("--output-dir", default=".",
                       help="directory for all artifacts")
        p.add_argument("--config", help="key=value config file; flags win")
        p.add_argument("--seed", type=int, help="RNG seed (default 0)")
        p.add_argument("--dump-intermediates",
                       action=argparse.BooleanOptionalAction,
                       help="also write previews and the NNF table")
        p.add_argument("--voxel-ratio", type=float,
                       help="downsampling voxel edge as a fraction of the "
                       "longest bounding-box axis (default 0.05)")
        p.add_argument("--control-m", type=int, dest="m",
                       help="control points minus one along u (default 19)")
        p.add_argument("--control-n", type=int, dest="n",
                       help="control points minus one along v (default 19)")
        p.add_argument("--degree", type=int, help="B-spline degree (default 3)")
        p.add_argument("--fit-iterations", type=int,
                       help="fit/correct rounds (default 10)")
        p.add_argument("--regularization-weight", type=float,
                       help="smoothing weight (default: auto)")
        p.add_argument("--patch-size", type=int,
                       help="odd patch edge for matching (default 11)")
        p.add_argument("--pm-iterations", type=int,
                       help="patch-match sweeps (default 10)")
        p.add_argument("--solver-tol", type=float,
                       help="relative residual target (default 1e-10)")
        p.add_argument("--solver-max-iter", type=int,
                       help="iteration cap for the large-system solver")
        p.add_argument("--normal-k", type=int, dest="k_normals",
                       help="neighborhood size for normals (default 16)")
        p.add_argument("--epsilon", type=float,
                       help="projection validity threshold (default 1e-3)")
        p.add_argument("--r-max", type=int,
                       help="raster resolution cap (default 4096)")
        p.add_argument("--density-factor", type=float,
                       help="refill density multiplier (default 1.0)")

    for name, blurb in (
        ("run", "full pipeline: downsample, fit, decompose, inpaint, "
                "reconstruct, merge"),
        ("downsample", "voxel-downsample the input cloud"),
        ("fit", "fit the surface to the downsampled cloud"),
        ("decompose", "project the cloud and rasterize signed heights"),
        ("inpaint", "fill height-map holes"),
        ("reconstruct", "synthesize points and merge with the input"),
        ("metrics", "compare a result cloud against a reference"),
    ):
        p = sub.add_parser(name, help=blurb)
        add_common(p)
        if name == "fit":
            p.add_argument("--cloud", help="cloud to fit "
                           "(default: <output-dir>/downsampled.ply)")
        if name in ("decompose", "reconstruct", "metrics"):
            p.add_argument("--surface", help="surface file "
                           "(default: <output-dir>/surface.txt)")
        if name == "inpaint":
            p.add_argument("--height", help="height map to fill "
                           "(default: <output-dir>/height_before.hf01)")
        if name == "reconstruct":
            p.add_argument("--height-before", help="raw height map")
            p.add_argument("--height-after", help="filled height map")
        if name == "metrics":
            p.add_argument("--truth", required=True,
                           help="reference point cloud")
            p.add_argument("--height-a", help="first height map for RMSE")
            p.add_argument("--height-b", help="second height map for RMSE")
    return parser


_FLAG_FIELDS = {
    "input": "input_path",
    "output_dir": "output_dir",
    "seed": "rng_seed",
    "dump_intermediates": "dump_intermediates",
    "voxel_ratio": "voxel_ratio",
    "m": "m",
    "n": "n",
    "degree": "degree",
    "fit_iterations": "fit_iterations",
    "regularization_weight": "regularization_weight",
    "patch_size": "patch_size",
    "pm_iterations": "pm_iterations",
    "solver_tol": "solver_tol",
    "solver_max_iter": "solver_max_iter",
    "k_normals": "k_normals",
    "epsilon": "epsilon",
    "r_max": "r_max",
    "density_factor": "density_factor",
}

_NEEDS_INPUT = {"run", "downsample", "decompose", "reconstruct", "metrics"}


def _config_from_args(args) -> PipelineConfig:
    values = _read_config_file(args.config) if args.config else {}
    for flag, fieldname in _FLAG_FIELDS.items():
        flag_value = getattr(args, flag, None)
        if flag_value is not None:
            values[fieldname] = flag_value
    if args.command in _NEEDS_INPUT and not values.get("input_path"):
        raise InvalidParameter(f"'{args.command}' requires --input")
    return PipelineConfig(**values)


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = _config_from_args(args)
    except (InvalidParameter, OSError) as exc:
        parser.error(str(exc))  # exits with status 2
    try:
        if args.command == "run":
            report = run_pipeline(cfg)
            logger.info(
                "wrote %s (%s points)",
                cfg.artifact("merged"), report.output_points,
            )
        else:
            stats = run_stage(
                args.command,
                cfg,
                cloud_path=getattr(args, "cloud", None),
                surface_path=getattr(args, "surface", None),
                height_path=getattr(args, "height", None),
                height_before_path=getattr(args, "height_before", None),
                height_after_path=getattr(args, "height_after", None),
                truth_path=getattr(args, "truth", None),
                height_a_path=getattr(args, "height_a", None),
                height_b_path=getattr(args, "height_b", None),
            )
            logger.info("stage %s: %s", args.command, stats)
    except StageFailure as exc:
        print(f"terrafill: {exc}", file=sys.stderr)
        return 3
    except (TerrafillError, OSError) as exc:
        print(f"terrafill: {args.command}: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
