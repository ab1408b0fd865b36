"""Shared geometry builders for the test suite."""

from __future__ import annotations

import numpy as np

from gridprim.camera import Intrinsics, OrganizedCloud, backproject
from gridprim.synthetic import SceneCylinder, ScenePlane, render

VGA = Intrinsics(fx=570.0, fy=570.0, cx=319.5, cy=239.5)


def render_cloud(prims, intr: Intrinsics = VGA, width: int = 640, height: int = 480, **kw) -> OrganizedCloud:
    return render(prims, intr, width=width, height=height, **kw).to_cloud()


def wall_cloud(offset: float = 2.0, **kw) -> OrganizedCloud:
    return render_cloud([ScenePlane(normal=(0.0, 0.0, -1.0), offset=offset)], **kw)


def pipe(radius: float, center, axis=(1.0, 0.0, 0.0)) -> SceneCylinder:
    return SceneCylinder(axis=axis, center=tuple(center), radius=radius)


def rotation_about(axis, angle_rad: float) -> np.ndarray:
    """Rodrigues rotation matrix, independent of the library implementation."""
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    k = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]], dtype=np.float64)
    return np.eye(3) + np.sin(angle_rad) * k + (1.0 - np.cos(angle_rad)) * (k @ k)


def circle_points(rng: np.random.Generator, radius: float, center, m: int, inward: bool = False):
    """Sample points and outward unit normals on a circle in the z = 0 plane.

    Returns:
        (points, normals): both (m, 3), points = center + radius * normals.
    """
    center = np.asarray(center, dtype=np.float64)
    angles = np.sort(rng.uniform(0.0, 2.0 * np.pi, size=m))
    normals = np.stack([np.cos(angles), np.sin(angles), np.zeros(m)], axis=-1)
    points = center + radius * normals
    if inward:
        normals = -normals
    return points, normals


def cylinder_surface_points(
    axis,
    center,
    radius: float,
    n_axial: int = 20,
    n_arc: int = 25,
    arc_half_rad: float = 1.0,
    length: float = 1.0,
    facing=(0.0, 0.0, -1.0),
):
    """Exact points on a cylinder patch centered on the camera-facing side.

    The arc is laid out around the direction of ``facing`` projected off the
    axis, so the patch resembles what a depth camera sees.

    Returns:
        (points, normals): ((n_axial * n_arc, 3)) each; normals point outward.
    """
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    c = np.asarray(center, dtype=np.float64)
    f = np.asarray(facing, dtype=np.float64)
    u = f - (f @ a) * a
    u = u / np.linalg.norm(u)
    v = np.cross(a, u)
    ts = np.linspace(-length / 2.0, length / 2.0, n_axial)
    phis = np.linspace(-arc_half_rad, arc_half_rad, n_arc)
    tt, pp = np.meshgrid(ts, phis, indexing="ij")
    normals = np.cos(pp)[..., None] * u + np.sin(pp)[..., None] * v
    points = c + tt[..., None] * a + radius * normals
    return points.reshape(-1, 3), normals.reshape(-1, 3)


def sphere_cloud(intr: Intrinsics = VGA, center=(0.0, 0.0, 2.0), radius: float = 0.8,
                 width: int = 640, height: int = 480) -> OrganizedCloud:
    """Depth render of a sphere (the scene grammar has no sphere on purpose)."""
    c = np.asarray(center, dtype=np.float64)
    u = (np.arange(width) - intr.cx) / intr.fx
    v = (np.arange(height) - intr.cy) / intr.fy
    d = np.stack(np.broadcast_arrays(u[None, :], v[:, None], np.ones((height, width))), axis=-1)
    dd = np.einsum("hwi,hwi->hw", d, d)
    dc = d @ c
    disc = dc * dc - dd * (c @ c - radius * radius)
    t = np.where(disc >= 0.0, (dc - np.sqrt(np.maximum(disc, 0.0))) / dd, 0.0)
    depth = np.where(t > 0.0, t, 0.0)
    return backproject(depth, intr)


def angle_deg(u, v) -> float:
    """Unsigned angle between two vectors in degrees, direction-insensitive."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    dot = abs(float(u @ v) / (np.linalg.norm(u) * np.linalg.norm(v)))
    return float(np.degrees(np.arccos(min(dot, 1.0))))


def rotation_angle_deg(r: np.ndarray) -> float:
    """Rotation angle of a rotation matrix in degrees."""
    c = (float(np.trace(r)) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def transformed_plane(normal, d, rot: np.ndarray, t: np.ndarray):
    """Plane parameters seen from a camera displaced by (rot, t).

    The pose maps current-frame points to the previous frame; given the
    previous-frame plane this returns the current-frame one.
    """
    n = np.asarray(normal, dtype=np.float64)
    return rot.T @ n, float(n @ t + d)


def transformed_cylinder(axis, center, rot: np.ndarray, t: np.ndarray):
    """Cylinder axis/center seen from a camera displaced by (rot, t)."""
    a = np.asarray(axis, dtype=np.float64)
    c = np.asarray(center, dtype=np.float64)
    return rot.T @ a, rot.T @ (c - t)
