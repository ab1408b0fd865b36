"""Command-line front end.

Subcommands:
    extract  depth PNG -> primitive records (+ optional label PNG, timings, overlay figure)
    synth    scene description -> depth PNG (+ optional ground-truth records)
    bench    scene description or depth directory -> per-stage timing report + figure
    pose     two record/label file pairs -> relative pose line

Every tunable has a flag, and every flag can also be set through the
environment as GRIDPRIM_<FLAG> (dashes as underscores); an explicit flag
wins over the environment, which wins over the built-in default.

Exit codes: 0 success, 1 input errors, 2 degenerate geometry (the
diagnostic on stderr starts with "degenerate").
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from .camera import Intrinsics, backproject, read_depth_png, read_intrinsics, write_depth_png, write_intrinsics
from .cells import CellGridConfig
from .errors import DegenerateFitError, InputError, UnderConstrainedError
from .fitting import FitConfig
from .growing import GrowConfig
from .odometry import MatchConfig, PoseConfig, estimate_pose, match_cylinders, match_planes
from .pipeline import STAGE_NAMES, PipelineConfig, extract
from .probfit import ProbFitConfig
from .refine import RefineConfig
from .records import (
    features_from_records,
    format_pose_line,
    format_records,
    format_timing_report,
    read_label_png,
    read_records,
    write_label_png,
)
from .synthetic import parse_scene, render, write_scene

_ENV_PREFIX = "GRIDPRIM_"
_TRUE_WORDS = ("1", "true", "yes", "on")


def _apply_env_defaults(parser: argparse.ArgumentParser, env=os.environ) -> None:
    # Flags beat environment beats defaults; the environment only rewrites
    # the parser defaults, so explicitly passed options are untouched.
    for action in parser._actions:
        if not action.option_strings or action.dest in ("help",):
            continue
        raw = env.get(_ENV_PREFIX + action.dest.upper())
        if raw is None:
            continue
        if isinstance(action, argparse._StoreTrueAction):
            parser.set_defaults(**{action.dest: raw.strip().lower() in _TRUE_WORDS})
        elif action.type is not None:
            try:
                parser.set_defaults(**{action.dest: action.type(raw)})
            except ValueError as exc:
                raise InputError(f"bad value for {_ENV_PREFIX}{action.dest.upper()}: {raw!r}") from exc
        else:
            parser.set_defaults(**{action.dest: raw})


def _add_intrinsics_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--intrinsics", type=str, default=None, help="intrinsics key-value file (overrides fx/fy/cx/cy)")
    p.add_argument("--fx", type=float, default=570.0)
    p.add_argument("--fy", type=float, default=570.0)
    p.add_argument("--cx", type=float, default=319.5)
    p.add_argument("--cy", type=float, default=239.5)
    p.add_argument("--depth-scale", type=float, default=0.001, help="meters per PNG depth unit")


def _add_pipeline_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("cells")
    g.add_argument("--patch", type=int, default=20, help="cell side length in pixels")
    g.add_argument("--missing-fraction-max", type=float, default=0.3)
    g.add_argument("--depth-discontinuity-rel", type=float, default=0.1)
    g.add_argument("--sigma-coeff", type=float, default=1.425e-3)
    g.add_argument("--epsilon", type=float, default=0.005)
    g = p.add_argument_group("histogram and growing")
    g.add_argument("--polar-bins", type=int, default=20)
    g.add_argument("--azimuth-bins", type=int, default=20)
    g.add_argument("--normal-dot-min", type=float, default=float(np.cos(np.pi / 12.0)))
    g.add_argument("--min-seed-bin", type=int, default=5)
    g.add_argument("--min-segment-cells", type=int, default=5)
    g.add_argument("--dist-cap", type=float, default=0.1)
    g = p.add_argument_group("fitting")
    g.add_argument("--plane-min-score", type=float, default=100.0)
    g.add_argument("--extrusion-min-score", type=float, default=100.0)
    g.add_argument("--inlier-rel-err", type=float, default=0.15)
    g.add_argument("--ransac-iters", type=int, default=64)
    g.add_argument("--min-subsegment-cells", type=int, default=5)
    g.add_argument("--merge-normal-dot", type=float, default=float(np.cos(np.pi / 12.0)))
    g.add_argument("--merge-offset-floor", type=float, default=0.01)
    g = p.add_argument_group("refinement")
    g.add_argument("--mse-factor", type=float, default=9.0)
    g.add_argument("--threshold-floor", type=float, default=1e-18)
    g = p.add_argument_group("cylinder refit")
    g.add_argument("--subsample-step", type=int, default=5)
    g.add_argument("--refit-max-iters", type=int, default=50)
    g.add_argument("--damping-init", type=float, default=1e-4)
    g.add_argument("--cost-rel-tol", type=float, default=1e-8)
    g.add_argument("--refit-step-tol", type=float, default=1e-10)
    g.add_argument("--no-refine-cylinders", action="store_true", help="skip the probabilistic cylinder refit")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--parallel", action="store_true", help="thread per-segment fits and cylinder refits")


def _intrinsics_from(args) -> Intrinsics:
    if args.intrinsics:
        return read_intrinsics(args.intrinsics)
    return Intrinsics(fx=args.fx, fy=args.fy, cx=args.cx, cy=args.cy, depth_scale=args.depth_scale)


def _pipeline_config(args) -> PipelineConfig:
    return PipelineConfig(
        cells=CellGridConfig(
            patch_size=args.patch,
            missing_fraction_max=args.missing_fraction_max,
            depth_discontinuity_rel=args.depth_discontinuity_rel,
            sigma_coeff=args.sigma_coeff,
            epsilon=args.epsilon,
        ),
        growing=GrowConfig(
            normal_dot_min=args.normal_dot_min,
            min_seed_bin=args.min_seed_bin,
            min_segment_cells=args.min_segment_cells,
            dist_cap=args.dist_cap,
        ),
        fitting=FitConfig(
            plane_min_score=args.plane_min_score,
            extrusion_min_score=args.extrusion_min_score,
            inlier_rel_err=args.inlier_rel_err,
            ransac_iters=args.ransac_iters,
            min_subsegment_cells=args.min_subsegment_cells,
            seed=args.seed,
            merge_normal_dot=args.merge_normal_dot,
            merge_offset_floor=args.merge_offset_floor,
        ),
        refine=RefineConfig(mse_factor=args.mse_factor, threshold_floor=args.threshold_floor),
        probfit=ProbFitConfig(
            subsample_step=args.subsample_step,
            max_iters=args.refit_max_iters,
            damping_init=args.damping_init,
            cost_rel_tol=args.cost_rel_tol,
            step_tol=args.refit_step_tol,
            sigma_coeff=args.sigma_coeff,
        ),
        polar_bins=args.polar_bins,
        azimuth_bins=args.azimuth_bins,
        seed=args.seed,
        refine_cylinders=not args.no_refine_cylinders,
        parallel=args.parallel,
    )


def _cmd_extract(args) -> int:
    intr = _intrinsics_from(args)
    depth = read_depth_png(args.depth, intr)
    result = extract(backproject(depth, intr), _pipeline_config(args))
    text = format_records(result.planes, result.cylinders)
    sys.stdout.write(text)
    if args.out_models:
        Path(args.out_models).write_text(text)
    if args.out_labels:
        write_label_png(args.out_labels, result.labels)
    if args.timings:
        samples = {name: [value] for name, value in result.timings.stages().items()}
        samples["total"] = [result.timings.total]
        Path(args.timings).write_text(format_timing_report(samples))
    if args.out_figure:
        from .report import save_label_figure

        save_label_figure(args.out_figure, result.labels, depth)
    n = len(result.planes) + len(result.cylinders)
    print(f"{len(result.planes)} plane(s), {len(result.cylinders)} cylinder(s), {n} total", file=sys.stderr)
    return 0


def _cmd_synth(args) -> int:
    intr = _intrinsics_from(args)
    prims = parse_scene(args.scene)
    scene = render(
        prims,
        intr,
        width=args.width,
        height=args.height,
        noise_sigma=args.sigma,
        noise_sigma_coeff=args.sigma_coeff,
        seed=args.seed,
    )
    write_depth_png(args.out, scene.depth, intr)
    if args.out_truth:
        write_scene(args.out_truth, prims)
    if args.out_intrinsics:
        write_intrinsics(args.out_intrinsics, intr)
    print(f"wrote {args.out}", file=sys.stderr)
    return 0


def _bench_clouds(args, intr: Intrinsics) -> list:
    if args.scene:
        prims = parse_scene(args.scene)
        scene = render(
            prims,
            intr,
            width=args.width,
            height=args.height,
            noise_sigma=args.sigma,
            seed=args.seed,
        )
        return [scene.to_cloud()]
    paths = sorted(Path(args.depth_dir).glob("*.png"))
    if not paths:
        raise InputError(f"no PNG files under {args.depth_dir}")
    return [backproject(read_depth_png(p, intr), intr) for p in paths]


def _cmd_bench(args) -> int:
    if args.reps < 1:
        raise InputError("--reps must be >= 1")
    intr = _intrinsics_from(args)
    clouds = _bench_clouds(args, intr)
    cfg = _pipeline_config(args)
    samples: dict[str, list[float]] = {name: [] for name in (*STAGE_NAMES, "total")}
    for run in range(args.warmup + args.reps):
        result = extract(clouds[run % len(clouds)], cfg)
        if run < args.warmup:
            continue
        for name in STAGE_NAMES:
            samples[name].append(getattr(result.timings, name))
        samples["total"].append(result.timings.total)
    text = format_timing_report(samples)
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        out.write_text(text)
        if not args.no_figure:
            from .report import save_timing_figure

            save_timing_figure(out.with_suffix(".png"), samples)
    return 0


def _cmd_pose(args) -> int:
    prev = features_from_records(*read_records(args.prev_models), labels=read_label_png(args.prev_labels))
    curr = features_from_records(*read_records(args.curr_models), labels=read_label_png(args.curr_labels))
    match_cfg = MatchConfig(
        max_axis_angle=args.match_axis_angle,
        max_radius_mahalanobis=args.match_radius_mahal,
        min_normal_dot=args.match_normal_dot,
        max_plane_offset=args.match_plane_offset,
        min_overlap_ratio=args.match_overlap,
    )
    pose_cfg = PoseConfig(
        alpha_plane=args.alpha_plane,
        alpha_cylinder=args.alpha_cylinder,
        max_iters=args.pose_max_iters,
        step_tol=args.pose_step_tol,
    )
    plane_pairs = [(prev.planes[i], curr.planes[j]) for i, j in match_planes(prev, curr, match_cfg)]
    cyl_pairs = [(prev.cylinders[i], curr.cylinders[j]) for i, j in match_cylinders(prev, curr, match_cfg)]
    result = estimate_pose(plane_pairs, cyl_pairs, pose_cfg)
    line = format_pose_line(result.pose)
    print(line)
    print(
        f"{len(plane_pairs)} plane match(es), {len(cyl_pairs)} cylinder match(es), "
        f"{result.iterations} iteration(s), cost {result.cost:.6g}",
        file=sys.stderr,
    )
    if args.out:
        Path(args.out).write_text(line + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridprim", description="Plane and cylinder extraction from organized depth maps")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="extract primitives from a depth PNG")
    p.add_argument("--depth", type=str, required=True, help="16-bit depth PNG")
    p.add_argument("--out-models", type=str, default=None, help="write the record file here (stdout regardless)")
    p.add_argument("--out-labels", type=str, default=None, help="write the 8-bit label PNG here")
    p.add_argument("--timings", type=str, default=None, help="write a single-run stage timing report here")
    p.add_argument("--out-figure", type=str, default=None, help="write a label overlay figure here")
    _add_intrinsics_flags(p)
    _add_pipeline_flags(p)
    p.set_defaults(func=_cmd_extract)
    _apply_env_defaults(p)

    p = sub.add_parser("synth", help="render a scene description to a depth PNG")
    p.add_argument("--scene", type=str, required=True, help="scene description file")
    p.add_argument("--out", type=str, required=True, help="output depth PNG")
    p.add_argument("--out-truth", type=str, default=None, help="write the ground-truth scene records here")
    p.add_argument("--out-intrinsics", type=str, default=None, help="write the intrinsics key-value file here")
    p.add_argument("--sigma", type=float, default=0.0, help="additive depth noise sigma in meters")
    p.add_argument("--sigma-coeff", type=float, default=None, help="quadratic depth noise coefficient")
    p.add_argument("--width", type=int, default=640)
    p.add_argument("--height", type=int, default=480)
    p.add_argument("--seed", type=int, default=0)
    _add_intrinsics_flags(p)
    p.set_defaults(func=_cmd_synth)
    _apply_env_defaults(p)

    p = sub.add_parser("bench", help="time the pipeline stages")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--scene", type=str, default=None, help="scene description file to render and time")
    src.add_argument("--depth-dir", type=str, default=None, help="directory of depth PNGs to cycle through")
    p.add_argument("--reps", type=int, default=20, help="timed repetitions (after warm-up)")
    p.add_argument("--warmup", type=int, default=3, help="untimed warm-up runs")
    p.add_argument("--out", type=str, default=None, help="write the report here; a .png figure lands beside it")
    p.add_argument("--no-figure", action="store_true", help="skip the timing figure")
    p.add_argument("--sigma", type=float, default=0.0, help="scene render noise sigma in meters")
    p.add_argument("--width", type=int, default=640)
    p.add_argument("--height", type=int, default=480)
    _add_intrinsics_flags(p)
    _add_pipeline_flags(p)
    p.set_defaults(func=_cmd_bench)
    _apply_env_defaults(p)

    p = sub.add_parser("pose", help="relative pose between two extracted frames")
    p.add_argument("--prev-models", type=str, required=True)
    p.add_argument("--prev-labels", type=str, required=True)
    p.add_argument("--curr-models", type=str, required=True)
    p.add_argument("--curr-labels", type=str, required=True)
    p.add_argument("--out", type=str, default=None, help="write the pose line here")
    p.add_argument("--match-axis-angle", type=float, default=float(np.pi / 6.0))
    p.add_argument("--match-radius-mahal", type=float, default=2000.0)
    p.add_argument("--match-normal-dot", type=float, default=float(np.cos(np.pi / 6.0)))
    p.add_argument("--match-plane-offset", type=float, default=0.2)
    p.add_argument("--match-overlap", type=float, default=0.5)
    p.add_argument("--alpha-plane", type=float, default=0.01)
    p.add_argument("--alpha-cylinder", type=float, default=0.1)
    p.add_argument("--pose-max-iters", type=int, default=50)
    p.add_argument("--pose-step-tol", type=float, default=1e-10)
    p.set_defaults(func=_cmd_pose)
    _apply_env_defaults(p)

    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        return args.func(args)
    except (InputError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (UnderConstrainedError, DegenerateFitError) as exc:
        print(f"degenerate: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
