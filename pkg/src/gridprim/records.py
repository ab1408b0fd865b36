"""Text and image serialization of extraction results.

Primitive records are space-delimited lines, floats at 9 significant
digits, so a file written twice from the same result is byte-identical:

    id plane nx ny nz d mse cells pixels
    id cylinder ax ay az bx by bz r var_r mse cells pixels

ids are the 1-based values in the label image. Label images are written as
8-bit grayscale PNG, which caps a frame at 255 primitives.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InputError
from .fitting import CylinderModel, PlaneModel
from .odometry import CylinderFeature, FrameFeatures, PlaneFeature, Pose

_PLANE_TOKENS = 9
_CYLINDER_TOKENS = 13


def _fmt(x: float) -> str:
    return format(float(x), ".9g")


@dataclass(frozen=True)
class PlaneRecord:
    id: int
    normal: tuple[float, float, float]
    d: float
    mse: float
    cells: int
    pixels: int


@dataclass(frozen=True)
class CylinderRecord:
    id: int
    point_a: tuple[float, float, float]
    point_b: tuple[float, float, float]
    radius: float
    var_radius: float
    mse: float
    cells: int
    pixels: int


def format_records(planes: list[PlaneModel], cylinders: list[CylinderModel]) -> str:
    """Serialize fitted models; ids follow the label-image numbering."""
    lines = ["# id kind params... mse cells pixels"]
    next_id = 1
    for p in planes:
        fields = [str(next_id), "plane", *map(_fmt, p.normal), _fmt(p.d), _fmt(p.mse),
                  str(int(np.count_nonzero(p.cell_mask))), str(p.n_pixels)]
        lines.append(" ".join(fields))
        next_id += 1
    for c in cylinders:
        fields = [str(next_id), "cylinder", *map(_fmt, c.point_a), *map(_fmt, c.point_b),
                  _fmt(c.radius), _fmt(c.var_radius), _fmt(c.mse),
                  str(int(np.count_nonzero(c.cell_mask))), str(c.n_pixels)]
        lines.append(" ".join(fields))
        next_id += 1
    return "\n".join(lines) + "\n"


def write_records(path: str | Path, planes: list[PlaneModel], cylinders: list[CylinderModel]) -> None:
    Path(path).write_text(format_records(planes, cylinders))


def parse_records(text: str) -> tuple[list[PlaneRecord], list[CylinderRecord]]:
    """Parse the delimited record format back into typed records.

    Raises:
        InputError: malformed line, unknown kind, or wrong field count.
    """
    planes: list[PlaneRecord] = []
    cylinders: list[CylinderRecord] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        kind = tokens[1] if len(tokens) > 1 else "?"
        try:
            if kind == "plane":
                if len(tokens) != _PLANE_TOKENS:
                    raise ValueError(f"expected {_PLANE_TOKENS} fields, got {len(tokens)}")
                planes.append(
                    PlaneRecord(
                        id=int(tokens[0]),
                        normal=(float(tokens[2]), float(tokens[3]), float(tokens[4])),
                        d=float(tokens[5]),
                        mse=float(tokens[6]),
                        cells=int(tokens[7]),
                        pixels=int(tokens[8]),
                    )
                )
            elif kind == "cylinder":
                if len(tokens) != _CYLINDER_TOKENS:
                    raise ValueError(f"expected {_CYLINDER_TOKENS} fields, got {len(tokens)}")
                cylinders.append(
                    CylinderRecord(
                        id=int(tokens[0]),
                        point_a=(float(tokens[2]), float(tokens[3]), float(tokens[4])),
                        point_b=(float(tokens[5]), float(tokens[6]), float(tokens[7])),
                        radius=float(tokens[8]),
                        var_radius=float(tokens[9]),
                        mse=float(tokens[10]),
                        cells=int(tokens[11]),
                        pixels=int(tokens[12]),
                    )
                )
            else:
                raise ValueError(f"unknown primitive kind {kind!r}")
        except ValueError as exc:
            raise InputError(f"record line {lineno}: {exc}") from exc
    return planes, cylinders


def read_records(path: str | Path) -> tuple[list[PlaneRecord], list[CylinderRecord]]:
    return parse_records(Path(path).read_text())


def features_from_records(
    planes: list[PlaneRecord],
    cylinders: list[CylinderRecord],
    labels: np.ndarray | None = None,
) -> FrameFeatures:
    """Build matchable frame features from parsed records.

    Cylinder endpoint covariance is not serialized; downstream weighting
    falls back to an isotropic var_radius model.
    """
    pf = [
        PlaneFeature(normal=np.array(r.normal), d=r.d, mse=r.mse, n_pixels=r.pixels, label=r.id)
        for r in planes
    ]
    cf = [
        CylinderFeature(
            point_a=np.array(r.point_a),
            point_b=np.array(r.point_b),
            radius=r.radius,
            var_radius=r.var_radius,
            endpoint_cov=None,
            n_pixels=r.pixels,
            label=r.id,
        )
        for r in cylinders
    ]
    return FrameFeatures(planes=pf, cylinders=cf, labels=labels)


def write_label_png(path: str | Path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise InputError(f"label image must be 2-D, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() > 255:
        raise InputError("label ids outside 0..255 cannot be written as 8-bit PNG")
    Image.fromarray(labels.astype(np.uint8), mode="L").save(path)


def read_label_png(path: str | Path) -> np.ndarray:
    img = Image.open(path)
    if img.mode != "L":
        img = img.convert("L")
    return np.asarray(img, dtype=np.int32)


def format_timing_report(samples: dict[str, list[float]]) -> str:
    """Render per-stage wall-time statistics, one line per stage.

    Args:
        samples: stage name to list of per-run durations in seconds.

    Returns:
        Delimited text with microsecond columns: name mean p50 p95 max.
    """
    lines = ["# stage mean_us p50_us p95_us max_us"]
    for name, values in samples.items():
        us = np.asarray(values, dtype=np.float64) * 1e6
        if us.size == 0:
            raise InputError(f"no samples for stage {name!r}")
        lines.append(
            " ".join(
                [name, _fmt(us.mean()), _fmt(np.percentile(us, 50)), _fmt(np.percentile(us, 95)), _fmt(us.max())]
            )
        )
    return "\n".join(lines) + "\n"


def format_pose_line(pose: Pose) -> str:
    """One line ``tx ty tz qx qy qz qw`` with the normalized, qw>=0 quaternion."""
    q = pose.quaternion()
    return " ".join(map(_fmt, [*pose.translation, *q]))


def write_pose(path: str | Path, pose: Pose) -> None:
    Path(path).write_text(format_pose_line(pose) + "\n")


def parse_pose_line(line: str) -> Pose:
    from .odometry import matrix_from_quaternion

    tokens = line.split()
    if len(tokens) != 7:
        raise InputError(f"pose line needs 7 fields, got {len(tokens)}")
    vals = [float(t) for t in tokens]
    return Pose(rotation=matrix_from_quaternion(np.array(vals[3:])), translation=np.array(vals[:3]))
