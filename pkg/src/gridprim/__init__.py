"""Plane and cylinder extraction from organized depth maps.

The pipeline fits small planar patches on a fixed pixel grid, groups them
through a normal-direction histogram and region growing, classifies each
group as plane or cylinder, refines memberships per pixel, and optionally
refits cylinders probabilistically. Matched primitives across two frames
yield a relative camera pose.
"""

from .camera import (
    Intrinsics,
    OrganizedCloud,
    VGA_DEFAULT,
    backproject,
    depth_sigma,
    read_depth_png,
    read_intrinsics,
    write_depth_png,
    write_intrinsics,
)
from .cells import CellGrid, CellGridConfig, CellStats, MergedFit, build_grid, classify_cell
from .errors import DegenerateFitError, FlatSurfaceError, InputError, UnderConstrainedError
from .fitting import CylinderModel, FitConfig, PlaneModel, fit_segment, merge_coplanar_planes
from .growing import CellSegment, GrowConfig, grow_all, grow_seed
from .histogram import NormalHistogram
from .odometry import (
    CylinderFeature,
    FrameFeatures,
    MatchConfig,
    PlaneFeature,
    Pose,
    PoseConfig,
    PoseResult,
    estimate_pose,
    match_cylinders,
    match_planes,
)
from .pipeline import (
    ExtractionResult,
    PipelineConfig,
    StageTimings,
    estimate_frame_pose,
    extract,
    extract_depth,
)
from .probfit import ProbFitConfig, refine_cylinder
from .refine import RefineConfig, refine_labels
from .records import (
    CylinderRecord,
    PlaneRecord,
    features_from_records,
    format_records,
    parse_records,
    read_records,
    write_records,
)
from .synthetic import SceneCylinder, ScenePlane, SyntheticScene, parse_scene, render, write_scene

__version__ = "0.1.0"

__all__ = [
    "Intrinsics",
    "OrganizedCloud",
    "VGA_DEFAULT",
    "backproject",
    "depth_sigma",
    "read_depth_png",
    "read_intrinsics",
    "write_depth_png",
    "write_intrinsics",
    "CellGrid",
    "CellGridConfig",
    "CellStats",
    "MergedFit",
    "build_grid",
    "classify_cell",
    "DegenerateFitError",
    "FlatSurfaceError",
    "InputError",
    "UnderConstrainedError",
    "CylinderModel",
    "FitConfig",
    "PlaneModel",
    "fit_segment",
    "merge_coplanar_planes",
    "CellSegment",
    "GrowConfig",
    "grow_all",
    "grow_seed",
    "NormalHistogram",
    "CylinderFeature",
    "FrameFeatures",
    "MatchConfig",
    "PlaneFeature",
    "Pose",
    "PoseConfig",
    "PoseResult",
    "estimate_pose",
    "match_cylinders",
    "match_planes",
    "ExtractionResult",
    "PipelineConfig",
    "StageTimings",
    "estimate_frame_pose",
    "extract",
    "extract_depth",
    "ProbFitConfig",
    "refine_cylinder",
    "RefineConfig",
    "refine_labels",
    "CylinderRecord",
    "PlaneRecord",
    "features_from_records",
    "format_records",
    "parse_records",
    "read_records",
    "write_records",
    "SceneCylinder",
    "ScenePlane",
    "SyntheticScene",
    "parse_scene",
    "render",
    "write_scene",
    "__version__",
]
