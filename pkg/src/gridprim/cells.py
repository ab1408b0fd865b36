"""Uniform cell grid with per-cell planar fits from raw point moments.

The image is split into non-overlapping square patches. Each patch is
classified planar or not by three increasingly expensive gates: missing-data
fraction, depth discontinuities along the central pixel cross, and the MSE
of a PCA plane fit. Fits are computed from raw first/second moments so that
any union of cells can later be fit in O(1) by summing moments
(Koenig-Huygens reconstruction of the covariance).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import OrganizedCloud, depth_sigma
from .eig3 import symmetric_eig3
from .errors import DegenerateFitError, InputError

# Smallest point count a plane fit accepts; below this the covariance is
# rank-deficient by construction.
_MIN_FIT_POINTS = 3

# lambda_mid <= _DEGENERATE_RATIO * lambda_max flags collinear point sets.
# Sits above the closed-form eigensolver's noise floor (~1e-9 absolute of
# matrix scale) and far below any genuine 2D point spread.
_DEGENERATE_RATIO = 1e-8


@dataclass(frozen=True)
class CellGridConfig:
    patch_size: int = 20  # cell side in pixels
    missing_fraction_max: float = 0.3  # reject cells with more invalid pixels
    depth_discontinuity_rel: float = 0.1  # max |dz| between cross neighbors, relative to cell mean depth
    sigma_coeff: float = 1.425e-3  # depth noise model sigma(z) = coeff * z^2
    epsilon: float = 0.005  # planarity slack added to sigma(z_mean), meters

    def __post_init__(self) -> None:
        if self.patch_size < 2:
            raise InputError(f"patch_size must be >= 2, got {self.patch_size}")
        if not 0.0 <= self.missing_fraction_max <= 1.0:
            raise InputError(f"missing_fraction_max must be in [0, 1], got {self.missing_fraction_max}")

    def mse_bound(self, mean_depth: np.ndarray | float) -> np.ndarray | float:
        """Planarity MSE threshold (sigma(z_mean) + epsilon)^2 in m^2."""
        return np.square(depth_sigma(mean_depth, self.sigma_coeff) + self.epsilon)


@dataclass(frozen=True)
class CellStats:
    """Summary of one grid cell. Moments are raw (unnormalized) sums."""

    row: int
    col: int
    count: int  # valid pixels
    sum_p: np.ndarray  # (3,) sum of points
    sum_ppt: np.ndarray  # (3, 3) sum of outer products
    planar: bool
    centroid: np.ndarray | None = None  # (3,) mean point, None if count == 0
    normal: np.ndarray | None = None  # (3,) unit, camera-facing; planar cells only
    d: float | None = None  # plane offset, N . p + d = 0
    mse: float | None = None  # mean squared point-plane distance
    mean_depth: float | None = None
    corner_span: float | None = None  # 3D distance across the cell diagonal


class CellGrid:
    """Struct-of-arrays cell storage; ``cell(r, c)`` gives a CellStats view."""

    def __init__(
        self,
        patch_size: int,
        count: np.ndarray,
        sum_p: np.ndarray,
        sum_ppt: np.ndarray,
        planar: np.ndarray,
        centroid: np.ndarray,
        normal: np.ndarray,
        d: np.ndarray,
        mse: np.ndarray,
        mean_depth: np.ndarray,
        corner_span: np.ndarray,
    ):
        self.patch_size = patch_size
        self.count = count
        self.sum_p = sum_p
        self.sum_ppt = sum_ppt
        self.planar = planar
        self.centroid = centroid
        self.normal = normal
        self.d = d
        self.mse = mse
        self.mean_depth = mean_depth
        self.corner_span = corner_span

    @property
    def rows(self) -> int:
        return self.count.shape[0]

    @property
    def cols(self) -> int:
        return self.count.shape[1]

    def flat_id(self, row: int, col: int) -> int:
        return row * self.cols + col

    def rc(self, flat: int) -> tuple[int, int]:
        return divmod(flat, self.cols)

    def planar_ids(self) -> np.ndarray:
        """Flat ids of planar cells, ascending."""
        return np.flatnonzero(self.planar.ravel())

    def cell(self, row: int, col: int) -> CellStats:
        planar = bool(self.planar[row, col])
        count = int(self.count[row, col])
        has_fit = np.isfinite(self.mse[row, col])
        return CellStats(
            row=row,
            col=col,
            count=count,
            sum_p=self.sum_p[row, col].copy(),
            sum_ppt=self.sum_ppt[row, col].copy(),
            planar=planar,
            centroid=self.centroid[row, col].copy() if count > 0 else None,
            normal=self.normal[row, col].copy() if has_fit else None,
            d=float(self.d[row, col]) if has_fit else None,
            mse=float(self.mse[row, col]) if has_fit else None,
            mean_depth=float(self.mean_depth[row, col]) if count > 0 else None,
            corner_span=float(self.corner_span[row, col]) if np.isfinite(self.corner_span[row, col]) else None,
        )


@dataclass(frozen=True)
class MergedFit:
    """Plane fit of a union of cells, from pooled moments."""

    normal: np.ndarray  # (3,) unit, camera-facing
    d: float
    mse: float
    eigenvalues: np.ndarray  # (3,) covariance eigenvalues, ascending
    centroid: np.ndarray  # (3,)
    count: int


def cross_line_pixels(patch_size: int) -> tuple[np.ndarray, np.ndarray]:
    """(row_indices, col_indices) of the central cross scanned by the
    discontinuity gate, in cell-local coordinates. 2 * patch_size pixels."""
    mid = patch_size // 2
    rows = np.stack([np.full(patch_size, mid), np.arange(patch_size)], axis=-1)
    cols = np.stack([np.arange(patch_size), np.full(patch_size, mid)], axis=-1)
    return rows, cols


def _max_cross_jump(z: np.ndarray, valid: np.ndarray, patch_size: int) -> float:
    """Largest |dz| between adjacent valid pixels on the central cross."""
    mid = patch_size // 2
    best = 0.0
    for line_z, line_v in ((z[mid, :], valid[mid, :]), (z[:, mid], valid[:, mid])):
        pair = line_v[:-1] & line_v[1:]
        if pair.any():
            jump = np.abs(np.diff(line_z))[pair].max()
            best = max(best, float(jump))
    return best


def classify_cell(cloud: OrganizedCloud, row0: int, col0: int, cfg: CellGridConfig) -> CellStats:
    """Classify one patch whose top-left pixel is (row0, col0).

    The patch is cfg.patch_size pixels square and must lie inside the image.
    Returns CellStats with the fit populated only when every gate passed up
    to (and including) the covariance fit; ``planar`` additionally requires
    the MSE bound.
    """
    ps = cfg.patch_size
    if row0 < 0 or col0 < 0 or row0 + ps > cloud.height or col0 + ps > cloud.width:
        raise InputError(f"cell at ({row0}, {col0}) size {ps} exceeds image bounds")
    row, col = row0 // ps, col0 // ps

    pts = cloud.points[row0 : row0 + ps, col0 : col0 + ps]
    val = cloud.valid[row0 : row0 + ps, col0 : col0 + ps]
    count = int(val.sum())
    pts0 = np.where(val[..., None], pts, 0.0)
    sum_p = pts0.reshape(-1, 3).sum(axis=0)
    flat = pts0.reshape(-1, 3)
    sum_ppt = flat.T @ flat

    base = dict(row=row, col=col, count=count, sum_p=sum_p, sum_ppt=sum_ppt)
    if count == 0:
        return CellStats(planar=False, **base)

    centroid = sum_p / count
    mean_depth = float(pts0[..., 2].sum() / count)
    corner_span = _corner_span_scalar(cloud, row0, col0, ps, mean_depth)
    base.update(centroid=centroid, mean_depth=mean_depth, corner_span=corner_span)

    missing = 1.0 - count / (ps * ps)
    if missing > cfg.missing_fraction_max:
        return CellStats(planar=False, **base)
    if _max_cross_jump(pts[..., 2], val, ps) > cfg.depth_discontinuity_rel * mean_depth:
        return CellStats(planar=False, **base)
    if count < _MIN_FIT_POINTS:
        return CellStats(planar=False, **base)

    cov = sum_ppt / count - np.outer(centroid, centroid)
    w, v = symmetric_eig3(cov)
    normal, d = _orient(v, centroid)
    mse = float(max(w[0], 0.0))
    planar = mse < cfg.mse_bound(mean_depth)
    return CellStats(planar=planar, normal=normal, d=d, mse=mse, **base)


def _orient(normal: np.ndarray, centroid: np.ndarray) -> tuple[np.ndarray, float]:
    """Flip the normal toward the camera (N . centroid < 0) and derive d."""
    if float(np.dot(normal, centroid)) > 0.0:
        normal = -normal
    return normal, float(-np.dot(normal, centroid))


def _corner_span_scalar(cloud: OrganizedCloud, row0: int, col0: int, ps: int, mean_depth: float) -> float | None:
    for (ra, ca), (rb, cb) in (((0, 0), (ps - 1, ps - 1)), ((0, ps - 1), (ps - 1, 0))):
        if cloud.valid[row0 + ra, col0 + ca] and cloud.valid[row0 + rb, col0 + cb]:
            return float(np.linalg.norm(cloud.points[row0 + ra, col0 + ca] - cloud.points[row0 + rb, col0 + cb]))
    intr = cloud.intrinsics
    if intr is not None:
        return float(ps * mean_depth * np.hypot(1.0 / intr.fx, 1.0 / intr.fy))
    return None


def build_grid(cloud: OrganizedCloud, cfg: CellGridConfig) -> CellGrid:
    """Classify every full patch of the image (vectorized).

    Pixels beyond the last full patch in either direction are ignored.
    """
    ps = cfg.patch_size
    rows, cols = cloud.height // ps, cloud.width // ps
    if rows == 0 or cols == 0:
        raise InputError(
            f"patch_size {ps} larger than image {cloud.height}x{cloud.width}"
        )
    h, w = rows * ps, cols * ps

    pts = cloud.points[:h, :w]
    val = cloud.valid[:h, :w]

    # Homogeneous block-major buffer: one batched 4x4 Gram per cell yields
    # sum(p p^T), sum(p), and the valid count in a single GEMM.
    buf = np.empty((rows, cols, ps * ps, 4))
    buf5 = buf.reshape(rows, cols, ps, ps, 4)
    buf5[..., :3] = pts.reshape(rows, ps, cols, ps, 3).transpose(0, 2, 1, 3, 4)
    buf5[..., 3] = 1.0
    if not val.all():
        invalid = ~val.reshape(rows, ps, cols, ps).transpose(0, 2, 1, 3)
        buf5[invalid] = 0.0

    flat = buf.reshape(rows * cols, ps * ps, 4)
    gram = (flat.transpose(0, 2, 1) @ flat).reshape(rows, cols, 4, 4)
    sum_ppt = np.ascontiguousarray(gram[..., :3, :3])
    sum_p = np.ascontiguousarray(gram[..., :3, 3])
    count = np.rint(gram[..., 3, 3]).astype(np.int64)

    safe_count = np.maximum(count, 1)
    centroid = sum_p / safe_count[..., None]
    mean_depth = sum_p[..., 2] / safe_count

    missing_ok = (1.0 - count / (ps * ps)) <= cfg.missing_fraction_max
    max_jump = _max_cross_jump_grid(pts[..., 2], val, rows, cols, ps)
    jump_ok = max_jump <= cfg.depth_discontinuity_rel * mean_depth
    fit_mask = missing_ok & jump_ok & (count >= _MIN_FIT_POINTS)

    normal = np.zeros((rows, cols, 3))
    d = np.full((rows, cols), np.nan)
    mse = np.full((rows, cols), np.nan)
    planar = np.zeros((rows, cols), dtype=bool)

    if fit_mask.any():
        idx = np.nonzero(fit_mask)
        cov = sum_ppt[idx] / count[idx][:, None, None] - centroid[idx][:, :, None] * centroid[idx][:, None, :]
        w_eig, v_eig = symmetric_eig3(cov)
        flip = np.einsum("ki,ki->k", v_eig, centroid[idx]) > 0.0
        v_eig = np.where(flip[:, None], -v_eig, v_eig)
        normal[idx] = v_eig
        d[idx] = -np.einsum("ki,ki->k", v_eig, centroid[idx])
        mse_k = np.maximum(w_eig[:, 0], 0.0)
        mse[idx] = mse_k
        planar[idx] = mse_k < cfg.mse_bound(mean_depth[idx])

    corner_span = _corner_span_grid(cloud, pts, val, mean_depth, ps)
    return CellGrid(
        patch_size=ps,
        count=count,
        sum_p=sum_p,
        sum_ppt=sum_ppt,
        planar=planar,
        centroid=np.where(count[..., None] > 0, centroid, 0.0),
        normal=normal,
        d=d,
        mse=mse,
        mean_depth=np.where(count > 0, mean_depth, np.nan),
        corner_span=corner_span,
    )


def _max_cross_jump_grid(z: np.ndarray, valid: np.ndarray, rows: int, cols: int, ps: int) -> np.ndarray:
    """Vectorized counterpart of _max_cross_jump for all cells at once."""
    mid = ps // 2
    # Horizontal center lines: one image row per cell row.
    zr = z[mid::ps, :].reshape(rows, cols, ps)
    vr = valid[mid::ps, :].reshape(rows, cols, ps)
    dr = np.abs(np.diff(zr, axis=-1))
    pr = vr[..., :-1] & vr[..., 1:]
    jump_r = np.where(pr, dr, 0.0).max(axis=-1)
    # Vertical center lines: one image column per cell column.
    zc = z[:, mid::ps].T.reshape(cols, rows, ps)
    vc = valid[:, mid::ps].T.reshape(cols, rows, ps)
    dc = np.abs(np.diff(zc, axis=-1))
    pc = vc[..., :-1] & vc[..., 1:]
    jump_c = np.where(pc, dc, 0.0).max(axis=-1).T
    return np.maximum(jump_r, jump_c)


def _corner_span_grid(
    cloud: OrganizedCloud,
    pts: np.ndarray,
    val: np.ndarray,
    mean_depth: np.ndarray,
    ps: int,
) -> np.ndarray:
    p_tl = pts[0::ps, 0::ps]
    p_br = pts[ps - 1 :: ps, ps - 1 :: ps]
    p_tr = pts[0::ps, ps - 1 :: ps]
    p_bl = pts[ps - 1 :: ps, 0::ps]
    ok1 = val[0::ps, 0::ps] & val[ps - 1 :: ps, ps - 1 :: ps]
    ok2 = val[0::ps, ps - 1 :: ps] & val[ps - 1 :: ps, 0::ps]
    d1 = np.linalg.norm(p_tl - p_br, axis=-1)
    d2 = np.linalg.norm(p_tr - p_bl, axis=-1)
    intr = cloud.intrinsics
    if intr is not None:
        fallback = ps * mean_depth * np.hypot(1.0 / intr.fx, 1.0 / intr.fy)
    else:
        fallback = np.full_like(mean_depth, np.nan)
    return np.where(ok1, d1, np.where(ok2, d2, fallback))


def merged_plane_fit(cells: list[CellStats] | tuple[CellStats, ...]) -> MergedFit:
    """Plane fit of a cell union in O(#cells), summing raw moments.

    Matches a direct PCA fit of the concatenated member points up to
    floating-point reconstruction error.

    Raises:
        DegenerateFitError: fewer than 3 points total, or the pooled
            covariance is rank-deficient (collinear points).
    """
    if not cells:
        raise DegenerateFitError("merged fit of an empty cell set")
    count = sum(c.count for c in cells)
    sum_p = np.sum([c.sum_p for c in cells], axis=0)
    sum_ppt = np.sum([c.sum_ppt for c in cells], axis=0)
    return _fit_from_moments(count, sum_p, sum_ppt)


def _fit_from_moments(count: int, sum_p: np.ndarray, sum_ppt: np.ndarray) -> MergedFit:
    if count < _MIN_FIT_POINTS:
        raise DegenerateFitError(f"plane fit needs >= {_MIN_FIT_POINTS} points, got {count}")
    centroid = sum_p / count
    cov = sum_ppt / count - np.outer(centroid, centroid)
    w, v = symmetric_eig3(cov)
    if w[1] <= _DEGENERATE_RATIO * max(w[2], 0.0):
        raise DegenerateFitError("rank-deficient covariance (collinear points)")
    normal, d = _orient(v, centroid)
    return MergedFit(
        normal=normal,
        d=d,
        mse=float(max(w[0], 0.0)),
        eigenvalues=np.maximum(w, 0.0),
        centroid=centroid,
        count=count,
    )


def fit_cell_union(grid: CellGrid, mask: np.ndarray) -> MergedFit:
    """merged_plane_fit over the cells selected by a (rows, cols) bool mask."""
    idx = np.nonzero(mask)
    count = int(grid.count[idx].sum())
    sum_p = grid.sum_p[idx].sum(axis=0)
    sum_ppt = grid.sum_ppt[idx].sum(axis=0)
    return _fit_from_moments(count, sum_p, sum_ppt)
