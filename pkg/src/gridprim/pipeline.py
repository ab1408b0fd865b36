"""End-to-end primitive extraction from an organized depth frame.

Stage order: cell fitting, normal histogram, region growing, model fitting
(with coplanar merging), pixel-level refinement, then per-cylinder
probabilistic refitting. Per-stage wall times are recorded; the cylinder
refit is included in the total only, so the named stages never sum past it.

Determinism: every RANSAC draw comes from a per-segment generator seeded
with (seed, segment index), so results are independent of how many segments
run and of any thread scheduling under ``parallel=True``.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .camera import Intrinsics, OrganizedCloud, backproject
from .cells import CellGrid, CellGridConfig, build_grid
from .errors import DegenerateFitError
from .fitting import (
    CylinderModel,
    FitConfig,
    PlaneModel,
    fit_segment,
    merge_coplanar_planes,
)
from .growing import GrowConfig, grow_all
from .histogram import NormalHistogram
from .odometry import (
    CylinderFeature,
    FrameFeatures,
    MatchConfig,
    PlaneFeature,
    PoseConfig,
    PoseResult,
    estimate_pose,
    match_cylinders,
    match_planes,
)
from .probfit import ProbFitConfig, refine_cylinder, subsample_pixels
from .refine import RefineConfig, erode4, pixel_masks, refine_labels

STAGE_NAMES = ("cell_fit", "histogram", "growing", "fitting", "refinement")


@dataclass
class StageTimings:
    cell_fit: float = 0.0
    histogram: float = 0.0
    growing: float = 0.0
    fitting: float = 0.0
    refinement: float = 0.0
    total: float = 0.0

    def stages(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in STAGE_NAMES}


@dataclass
class PipelineConfig:
    cells: CellGridConfig = field(default_factory=CellGridConfig)
    growing: GrowConfig = field(default_factory=GrowConfig)
    fitting: FitConfig = field(default_factory=FitConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    probfit: ProbFitConfig = field(default_factory=ProbFitConfig)
    polar_bins: int = 20
    azimuth_bins: int = 20
    seed: int = 0
    refine_cylinders: bool = True  # run the probabilistic cylinder refit
    parallel: bool = False  # thread per-segment fits and cylinder refits


@dataclass
class ExtractionResult:
    planes: list[PlaneModel]
    cylinders: list[CylinderModel]
    labels: np.ndarray  # (H, W) int32; planes take 1..P, cylinders P+1..
    grid: CellGrid
    timings: StageTimings

    def primitives(self) -> list[PlaneModel | CylinderModel]:
        return [*self.planes, *self.cylinders]

    def frame_features(self) -> FrameFeatures:
        planes = [
            PlaneFeature(normal=p.normal, d=p.d, mse=p.mse, n_pixels=p.n_pixels, label=k + 1)
            for k, p in enumerate(self.planes)
        ]
        base = len(self.planes)
        cylinders = [
            CylinderFeature(
                point_a=c.point_a,
                point_b=c.point_b,
                radius=c.radius,
                var_radius=c.var_radius,
                endpoint_cov=c.endpoint_cov,
                n_pixels=c.n_pixels,
                label=base + k + 1,
            )
            for k, c in enumerate(self.cylinders)
        ]
        return FrameFeatures(planes=planes, cylinders=cylinders, labels=self.labels)


def _cell_point_lookup(grid: CellGrid, cloud: OrganizedCloud):
    """Callable gathering the valid pixel points of a list of flat cell ids."""
    ps = grid.patch_size
    h, w = grid.rows * ps, grid.cols * ps
    pts_cells = cloud.points[:h, :w].reshape(grid.rows, ps, grid.cols, ps, 3).transpose(0, 2, 1, 3, 4)
    val_cells = cloud.valid[:h, :w].reshape(grid.rows, ps, grid.cols, ps).transpose(0, 2, 1, 3)

    def lookup(cell_ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(cell_ids, dtype=np.int64).ravel()
        if ids.size == 0:
            return np.empty((0, 3))
        r, c = np.divmod(ids, grid.cols)
        pts = pts_cells[r, c].reshape(-1, 3)
        ok = val_cells[r, c].reshape(-1)
        return pts[ok]

    return lookup


def extract(cloud: OrganizedCloud, cfg: PipelineConfig = PipelineConfig()) -> ExtractionResult:
    """Run the full extraction pipeline on a back-projected cloud.

    Args:
        cloud: organized point cloud with validity mask.
        cfg: stage parameters; ``cfg.seed`` drives all random draws.

    Returns:
        ExtractionResult with fitted models, the pixel label image, the cell
        grid, and stage timings.
    """
    t_start = time.perf_counter()

    t0 = time.perf_counter()
    grid = build_grid(cloud, cfg.cells)
    t_cell = time.perf_counter() - t0

    t0 = time.perf_counter()
    planar = grid.planar_ids()
    normals = grid.normal.reshape(-1, 3)[planar]
    hist = NormalHistogram.build(normals, planar, cfg.polar_bins, cfg.azimuth_bins)
    t_hist = time.perf_counter() - t0

    t0 = time.perf_counter()
    segments = grow_all(grid, hist, cfg.growing)
    t_grow = time.perf_counter() - t0

    t0 = time.perf_counter()
    lookup = _cell_point_lookup(grid, cloud)

    def fit_one(args):
        index, segment = args
        rng = np.random.default_rng([cfg.seed, index])
        return fit_segment(grid, segment.mask, lookup, cfg.fitting, rng)

    if cfg.parallel and len(segments) > 1:
        with ThreadPoolExecutor() as pool:
            results = list(pool.map(fit_one, enumerate(segments)))
    else:
        results = [fit_one(item) for item in enumerate(segments)]
    planes: list[PlaneModel] = []
    cylinders: list[CylinderModel] = []
    for res in results:
        planes.extend(res.planes)
        cylinders.extend(res.cylinders)
    planes = merge_coplanar_planes(planes, grid, cfg.fitting)
    t_fit = time.perf_counter() - t0

    t0 = time.perf_counter()
    ordered: list[PlaneModel | CylinderModel] = [*planes, *cylinders]
    kept = [p for p in ordered if erode4(p.cell_mask).any()]
    labels = refine_labels(kept, grid, cloud, cfg.refine)
    for prim, mask in zip(kept, pixel_masks(labels, len(kept))):
        prim.pixel_mask = mask
        prim.n_pixels = int(np.count_nonzero(mask))
    t_refine = time.perf_counter() - t0

    kept_planes = [p for p in kept if isinstance(p, PlaneModel)]
    kept_cylinders = [c for c in kept if isinstance(c, CylinderModel)]

    if cfg.refine_cylinders and kept_cylinders:
        def refit(model: CylinderModel) -> CylinderModel:
            rows, cols = subsample_pixels(model.pixel_mask, cfg.probfit.subsample_step)
            pts = cloud.points[rows, cols]
            if pts.shape[0] < 6:
                return model
            try:
                return refine_cylinder(model, pts, cfg.probfit)
            except DegenerateFitError:
                return model  # keep the direct fit when the refit is singular

        if cfg.parallel and len(kept_cylinders) > 1:
            with ThreadPoolExecutor() as pool:
                kept_cylinders = list(pool.map(refit, kept_cylinders))
        else:
            kept_cylinders = [refit(c) for c in kept_cylinders]

    for c in kept_cylinders:
        if c.var_radius is None:
            # Refit disabled or singular: same size-scaled proxy planes use.
            c.var_radius = c.mse / max(c.n_pixels, 1)

    timings = StageTimings(
        cell_fit=t_cell,
        histogram=t_hist,
        growing=t_grow,
        fitting=t_fit,
        refinement=t_refine,
        total=time.perf_counter() - t_start,
    )
    return ExtractionResult(
        planes=kept_planes,
        cylinders=kept_cylinders,
        labels=labels,
        grid=grid,
        timings=timings,
    )


def extract_depth(depth_m: np.ndarray, intr: Intrinsics, cfg: PipelineConfig = PipelineConfig()) -> ExtractionResult:
    """Back-project a metric depth image and extract primitives from it."""
    return extract(backproject(depth_m, intr), cfg)


def estimate_frame_pose(
    prev: ExtractionResult,
    curr: ExtractionResult,
    match_cfg: MatchConfig = MatchConfig(),
    pose_cfg: PoseConfig = PoseConfig(),
) -> tuple[PoseResult, int, int]:
    """Match primitives across two extractions and solve the relative pose.

    Returns:
        (pose result, number of plane matches, number of cylinder matches).
        The pose maps current-frame points into the previous frame.
    """
    pf = prev.frame_features()
    cf = curr.frame_features()
    plane_pairs = [(pf.planes[i], cf.planes[j]) for i, j in match_planes(pf, cf, match_cfg)]
    cyl_pairs = [(pf.cylinders[i], cf.cylinders[j]) for i, j in match_cylinders(pf, cf, match_cfg)]
    result = estimate_pose(plane_pairs, cyl_pairs, pose_cfg)
    return result, len(plane_pairs), len(cyl_pairs)
