"""Analytic depth rendering of plane/cylinder scenes for tests and benchmarks."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import Intrinsics, OrganizedCloud, backproject
from .errors import InputError


@dataclass(frozen=True)
class ScenePlane:
    """Infinite plane N . p + d = 0 with N unit and camera-facing (d > 0)."""

    normal: tuple[float, float, float]
    offset: float


@dataclass(frozen=True)
class SceneCylinder:
    """Infinite cylinder: unit axis direction through ``center``, radius in meters."""

    axis: tuple[float, float, float]
    center: tuple[float, float, float]
    radius: float


ScenePrimitive = ScenePlane | SceneCylinder


@dataclass
class SyntheticScene:
    """Rendered depth map plus the ground truth it came from.

    ``depth`` is (H, W) float meters with 0.0 at pixels no primitive covers.
    """

    primitives: list[ScenePrimitive]
    depth: np.ndarray
    intrinsics: Intrinsics
    noise_sigma: float = 0.0

    def to_cloud(self) -> OrganizedCloud:
        return backproject(self.depth, self.intrinsics)


def _unit(v: np.ndarray, what: str) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if not np.isfinite(n) or n < 1e-12:
        raise InputError(f"{what} has zero length")
    return v / n


def render(
    primitives: list[ScenePrimitive],
    intr: Intrinsics,
    width: int = 640,
    height: int = 480,
    noise_sigma: float = 0.0,
    noise_sigma_coeff: float | None = None,
    seed: int = 0,
) -> SyntheticScene:
    """Render per-pixel depth as the nearest ray-primitive intersection.

    Rays go through pixel centers; the stored depth is the intersection's
    Z coordinate. Optional i.i.d. Gaussian noise is added to the depth of
    valid pixels, either with fixed ``noise_sigma`` or range-dependent
    ``noise_sigma_coeff * z^2`` (the latter wins when both are given).
    Noise never invalidates a pixel.

    Args:
        primitives: scene content; an empty list renders an all-invalid map.
        intr: render intrinsics.
        width, height: image size in pixels.
        noise_sigma: fixed depth noise sigma in meters.
        noise_sigma_coeff: coefficient of the quadratic noise model.
        seed: RNG seed for the noise draw.
    """
    if width <= 0 or height <= 0:
        raise InputError(f"image size must be positive, got {width}x{height}")
    u = (np.arange(width, dtype=np.float64) - intr.cx) / intr.fx
    v = (np.arange(height, dtype=np.float64) - intr.cy) / intr.fy
    # Ray through pixel (u, v) is t * (a, b, 1); depth along the ray is t.
    a = np.broadcast_to(u[None, :], (height, width))
    b = np.broadcast_to(v[:, None], (height, width))

    best = np.full((height, width), np.inf)
    for prim in primitives:
        t = _intersect(prim, a, b)
        np.fmin(best, t, out=best)

    depth = np.where(np.isfinite(best), best, 0.0)
    sigma_used = 0.0
    if noise_sigma_coeff is not None or noise_sigma > 0.0:
        rng = np.random.default_rng(seed)
        valid = depth > 0.0
        if noise_sigma_coeff is not None:
            sigma = noise_sigma_coeff * np.square(depth)
            sigma_used = float(noise_sigma_coeff)
        else:
            sigma = noise_sigma
            sigma_used = float(noise_sigma)
        noisy = depth + rng.standard_normal(depth.shape) * sigma
        # Keep the valid mask unchanged: noise may not push a depth to zero.
        depth = np.where(valid, np.maximum(noisy, 1e-9), 0.0)
    return SyntheticScene(primitives=list(primitives), depth=depth, intrinsics=intr, noise_sigma=sigma_used)


def _intersect(prim: ScenePrimitive, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Smallest positive ray parameter t (== depth) per pixel, inf on miss."""
    if isinstance(prim, ScenePlane):
        n = _unit(prim.normal, "plane normal")
        denom = n[0] * a + n[1] * b + n[2]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = -prim.offset / denom
        return np.where(np.isfinite(t) & (t > 0.0), t, np.inf)

    if isinstance(prim, SceneCylinder):
        if prim.radius <= 0.0:
            raise InputError(f"cylinder radius must be positive, got {prim.radius}")
        axis = _unit(prim.axis, "cylinder axis")
        c = np.asarray(prim.center, dtype=np.float64)
        # Components orthogonal to the axis: solve |t*d_perp - c_perp|^2 = r^2.
        d = np.stack([a, b, np.ones_like(a)], axis=-1)
        d_perp = d - np.einsum("hwi,i->hw", d, axis)[..., None] * axis
        c_perp = c - np.dot(c, axis) * axis
        aa = np.einsum("hwi,hwi->hw", d_perp, d_perp)
        bb = -2.0 * np.einsum("hwi,i->hw", d_perp, c_perp)
        cc = np.dot(c_perp, c_perp) - prim.radius**2
        disc = bb * bb - 4.0 * aa * cc
        with np.errstate(invalid="ignore", divide="ignore"):
            sq = np.sqrt(np.maximum(disc, 0.0))
            t1 = (-bb - sq) / (2.0 * aa)
            t2 = (-bb + sq) / (2.0 * aa)
        t = np.where(t1 > 0.0, t1, t2)
        ok = (disc >= 0.0) & (aa > 0.0) & (t > 0.0) & np.isfinite(t)
        return np.where(ok, t, np.inf)

    raise InputError(f"unknown primitive type {type(prim).__name__}")


def parse_scene(path: str | Path) -> list[ScenePrimitive]:
    """Parse a scene description file, one primitive per line.

    Grammar::

        plane N=(nx,ny,nz) d=<offset>
        cylinder axis=(ax,ay,az) center=(cx,cy,cz) r=<radius>

    Blank lines and '#' comments are ignored.
    """
    prims: list[ScenePrimitive] = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            prims.append(_parse_scene_line(line))
        except InputError as exc:
            raise InputError(f"{path}:{lineno}: {exc}") from None
    return prims


def _parse_scene_line(line: str) -> ScenePrimitive:
    # Strip spaces inside parenthesized tuples so fields split on whitespace.
    compact = []
    depth = 0
    for ch in line:
        depth += ch == "("
        depth -= ch == ")"
        if not (ch.isspace() and depth > 0):
            compact.append(ch)
    parts = "".join(compact).split()
    kind, fields = parts[0], {}
    for part in parts[1:]:
        if "=" not in part:
            raise InputError(f"expected key=value, got {part!r}")
        key, text = part.split("=", 1)
        try:
            if text.startswith("(") and text.endswith(")"):
                value = tuple(float(x) for x in text[1:-1].split(","))
                if len(value) != 3:
                    raise InputError(f"{key} needs 3 components, got {len(value)}")
                fields[key] = value
            else:
                fields[key] = float(text)
        except ValueError:
            raise InputError(f"bad number in {part!r}") from None
    try:
        if kind == "plane":
            prim = ScenePlane(normal=fields.pop("N"), offset=fields.pop("d"))
        elif kind == "cylinder":
            prim = SceneCylinder(axis=fields.pop("axis"), center=fields.pop("center"), radius=fields.pop("r"))
        else:
            raise InputError(f"unknown primitive kind {kind!r}")
    except KeyError as exc:
        raise InputError(f"{kind} record missing field {exc}") from None
    if fields:
        raise InputError(f"unknown field(s) {sorted(fields)} in {kind} record")
    if isinstance(prim, ScenePlane):
        _unit(prim.normal, "plane normal")
    else:
        _unit(prim.axis, "cylinder axis")
        if not prim.radius > 0:
            raise InputError(f"cylinder radius must be positive, got {prim.radius:g}")
    return prim


def write_scene(path: str | Path, primitives: list[ScenePrimitive]) -> None:
    """Write primitives in the canonical scene-description form."""
    lines = []
    for prim in primitives:
        if isinstance(prim, ScenePlane):
            n = ",".join(f"{x:.9g}" for x in prim.normal)
            lines.append(f"plane N=({n}) d={prim.offset:.9g}")
        elif isinstance(prim, SceneCylinder):
            ax = ",".join(f"{x:.9g}" for x in prim.axis)
            c = ",".join(f"{x:.9g}" for x in prim.center)
            lines.append(f"cylinder axis=({ax}) center=({c}) r={prim.radius:.9g}")
        else:
            raise InputError(f"unknown primitive type {type(prim).__name__}")
    Path(path).write_text("\n".join(lines) + "\n")
