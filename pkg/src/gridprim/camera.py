"""Depth image I/O and pinhole back-projection to organized point clouds."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InputError


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera parameters.

    Focal lengths and principal point are in pixels; ``depth_scale``
    converts stored integer depth units to meters (e.g. 0.001 for
    millimeter-quantized 16-bit depth).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    depth_scale: float = 0.001

    def __post_init__(self) -> None:
        if self.fx <= 0.0 or self.fy <= 0.0:
            raise InputError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if self.depth_scale <= 0.0:
            raise InputError(f"depth_scale must be positive, got {self.depth_scale}")


# Reasonable VGA structured-light defaults, used by the CLI when no
# intrinsics file is supplied.
VGA_DEFAULT = Intrinsics(fx=570.0, fy=570.0, cx=319.5, cy=239.5, depth_scale=0.001)


def depth_sigma(z: np.ndarray | float, coeff: float = 1.425e-3) -> np.ndarray | float:
    """Modeled depth standard deviation at range ``z`` (meters).

    Quadratic growth with range, the usual behavior of triangulation-based
    depth sensors: sigma(z) = coeff * z^2.
    """
    return coeff * np.square(z)


@dataclass
class OrganizedCloud:
    """Per-pixel 3D points in image layout.

    ``points`` is (H, W, 3) in meters, camera frame (X right, Y down,
    Z forward). Invalid pixels hold (0, 0, 0) and are excluded from all
    statistics via ``valid``.
    """

    points: np.ndarray  # (H, W, 3) float64
    valid: np.ndarray  # (H, W) bool
    intrinsics: Intrinsics | None = None

    @property
    def height(self) -> int:
        return self.points.shape[0]

    @property
    def width(self) -> int:
        return self.points.shape[1]


def backproject(depth_m: np.ndarray, intr: Intrinsics) -> OrganizedCloud:
    """Back-project a metric depth image through the pinhole model.

    Args:
        depth_m: (H, W) float array of depths in meters. Pixels with zero,
            negative, or NaN depth are marked invalid.
        intr: camera intrinsics.

    Returns:
        OrganizedCloud with X = (u - cx) * z / fx, Y = (v - cy) * z / fy,
        Z = z at every valid pixel.
    """
    depth_m = np.asarray(depth_m, dtype=np.float64)
    if depth_m.ndim != 2 or depth_m.size == 0:
        raise InputError(f"depth image must be 2-D and non-empty, got shape {depth_m.shape}")
    h, w = depth_m.shape
    valid = np.isfinite(depth_m) & (depth_m > 0.0)
    z = np.where(valid, depth_m, 0.0)
    u = np.arange(w, dtype=np.float64)
    v = np.arange(h, dtype=np.float64)
    x = (u[None, :] - intr.cx) * z / intr.fx
    y = (v[:, None] - intr.cy) * z / intr.fy
    points = np.stack([x, y, z], axis=-1)
    return OrganizedCloud(points=points, valid=valid, intrinsics=intr)


def read_depth_png(path: str | Path, intr: Intrinsics) -> np.ndarray:
    """Load a 16-bit depth PNG and convert to meters via ``depth_scale``.

    Stored value 0 means invalid and maps to depth 0.0.
    """
    img = Image.open(path)
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise InputError(f"{path}: expected single-channel depth PNG, got shape {arr.shape}")
    if arr.dtype not in (np.uint16, np.int32, np.uint8):
        raise InputError(f"{path}: unsupported depth dtype {arr.dtype}")
    return arr.astype(np.float64) * intr.depth_scale


def write_depth_png(path: str | Path, depth_m: np.ndarray, intr: Intrinsics) -> None:
    """Quantize metric depth to 16-bit units and write a PNG.

    Values are rounded to the nearest depth unit and clipped to the uint16
    range; non-finite and non-positive depths are stored as 0 (invalid).
    """
    depth_m = np.asarray(depth_m, dtype=np.float64)
    if depth_m.ndim != 2:
        raise InputError(f"depth image must be 2-D, got shape {depth_m.shape}")
    units = np.where(np.isfinite(depth_m) & (depth_m > 0.0), depth_m / intr.depth_scale, 0.0)
    units = np.clip(np.rint(units), 0, np.iinfo(np.uint16).max).astype(np.uint16)
    Image.fromarray(units).save(path)


_INTRINSICS_KEYS = ("fx", "fy", "cx", "cy", "depth_scale")


def read_intrinsics(path: str | Path) -> Intrinsics:
    """Parse a plain-text key-value intrinsics file.

    One ``key value`` pair per line; '#' starts a comment. All of fx, fy,
    cx, cy, depth_scale must be present exactly once.
    """
    values: dict[str, float] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise InputError(f"{path}:{lineno}: expected 'key value', got {raw!r}")
        key, text = parts
        if key not in _INTRINSICS_KEYS:
            raise InputError(f"{path}:{lineno}: unknown intrinsics key {key!r}")
        if key in values:
            raise InputError(f"{path}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = float(text)
        except ValueError as exc:
            raise InputError(f"{path}:{lineno}: bad number {text!r}") from exc
    missing = [k for k in _INTRINSICS_KEYS if k not in values]
    if missing:
        raise InputError(f"{path}: missing intrinsics keys {missing}")
    return Intrinsics(**values)


def write_intrinsics(path: str | Path, intr: Intrinsics) -> None:
    lines = [f"{key} {getattr(intr, key):.9g}" for key in _INTRINSICS_KEYS]
    Path(path).write_text("\n".join(lines) + "\n")
