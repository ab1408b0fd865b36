"""Plane/cylinder model selection and fitting over grown cell segments.

A segment first takes the cheap plane route: if the point covariance is
flat enough (middle/smallest eigenvalue ratio above a threshold) the pooled
plane fit is final. Otherwise the segment must look extruded: stacking the
cell normals with their negations, a surface swept along an axis leaves the
axis direction with (near) zero normal-covariance eigenvalue. Points and
normals are then projected along the axis, where the cross-section is a
circle fit in closed form; sequential MSAC-scored RANSAC splits multi-pipe
segments. Each recovered sub-segment is arbitrated back: whichever of the
plane or cylinder interpretation explains its points with lower MSE wins.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cells import CellGrid, MergedFit, fit_cell_union
from .eig3 import symmetric_eig3
from .errors import DegenerateFitError, FlatSurfaceError, InputError

_FLAT_DENOMINATOR = 1e-12  # circle-fit normal-equation singularity threshold
_AXIS_ALIGN_TOL = 1e-9  # |N . v| above 1 - tol marks a projection-degenerate sample


@dataclass(frozen=True)
class FitConfig:
    plane_min_score: float = 100.0  # covariance flatness accepting a plane outright
    extrusion_min_score: float = 100.0  # normal-covariance condition number gate
    inlier_rel_err: float = 0.15  # circle residual / radius accepting an inlier
    ransac_iters: int = 64  # hypotheses per sequential round
    min_subsegment_cells: int = 5  # smallest emitted sub-segment
    seed: int = 0  # RNG stream root; per-segment streams derive from it
    merge_normal_dot: float = float(np.cos(np.pi / 12.0))  # coplanar merge gate
    merge_offset_floor: float = 0.01  # meters, lower bound of the |d1-d2| merge gate


@dataclass
class PlaneModel:
    """Plane N . p + d = 0, N unit and camera-facing (d > 0)."""

    normal: np.ndarray  # (3,)
    d: float
    mse: float  # mean squared point-plane distance over member points
    cell_mask: np.ndarray  # (rows, cols) bool
    pixel_mask: np.ndarray | None = None  # (H, W) bool, set after refinement
    n_pixels: int = 0

    def distance(self, points: np.ndarray) -> np.ndarray:
        return np.abs(points @ self.normal + self.d)


@dataclass
class CylinderModel:
    """Finite cylinder patch: axis through point_a/point_b, radius in meters."""

    axis: np.ndarray  # (3,) unit, parallel to point_b - point_a
    point_a: np.ndarray  # (3,)
    point_b: np.ndarray  # (3,)
    radius: float
    mse: float  # mean squared (axis distance - radius) over member points
    cell_mask: np.ndarray
    pixel_mask: np.ndarray | None = None
    n_pixels: int = 0
    var_radius: float | None = None  # posterior radius variance, set by refinement
    param_cov: np.ndarray | None = None  # (5, 5) gauge-fixed parameter covariance
    endpoint_cov: np.ndarray | None = None  # (6, 6) covariance of (point_a, point_b)
    gauge_axis: int | None = None  # coordinate frozen by the parameterization

    def distance(self, points: np.ndarray) -> np.ndarray:
        rel = points - self.point_a
        axial = rel @ self.axis
        radial = rel - axial[..., None] * self.axis
        return np.abs(np.linalg.norm(radial, axis=-1) - self.radius)


def plane_score(grid: CellGrid, mask: np.ndarray) -> tuple[float, MergedFit]:
    """Flatness score of a cell union: middle / smallest covariance eigenvalue.

    Arbitrarily flat unions (smallest eigenvalue at rounding level) score
    inf; rank-deficient unions raise DegenerateFitError via the pooled fit.
    """
    fit = fit_cell_union(grid, mask)
    lam0, lam1 = float(fit.eigenvalues[0]), float(fit.eigenvalues[1])
    score = lam1 / lam0 if lam0 > 0.0 else np.inf
    return score, fit


def extrusion_test(normals: np.ndarray) -> tuple[np.ndarray, float]:
    """Axis candidate and anisotropy of the cell-normal distribution.

    PCA of the normals stacked with their negations (zero-mean by
    construction): an extruded surface keeps all normals orthogonal to its
    axis, so the smallest eigenvector is the axis and the condition number
    lambda_max / lambda_min diverges.

    Returns:
        (axis, score): unit axis estimate and the condition number
        (inf when lambda_min underflows).
    """
    normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    if normals.shape[0] < 2:
        raise DegenerateFitError(f"extrusion test needs >= 2 normals, got {normals.shape[0]}")
    cov = normals.T @ normals / normals.shape[0]
    w, v = symmetric_eig3(cov)
    lam_min, lam_max = float(max(w[0], 0.0)), float(w[2])
    score = lam_max / lam_min if lam_min > 0.0 else np.inf
    return v, score


def project_to_plane(points: np.ndarray, normals: np.ndarray, axis: np.ndarray):
    """Flatten points and normals along the extrusion axis.

    P' = P - (P . v) v; normals are projected the same way and renormalized.
    Samples whose normal is (numerically) parallel to the axis cannot be
    projected and are flagged out.

    Returns:
        (proj_points, proj_normals, valid): arrays of the input length;
        rows with valid == False hold zeros.
    """
    points = np.asarray(points, dtype=np.float64)
    normals = np.asarray(normals, dtype=np.float64)
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    pp = points - (points @ axis)[..., None] * axis
    np_raw = normals - (normals @ axis)[..., None] * axis
    norm = np.linalg.norm(np_raw, axis=-1)
    valid = norm > np.sqrt(_AXIS_ALIGN_TOL)
    safe = np.where(valid, norm, 1.0)
    pn = np.where(valid[..., None], np_raw / safe[..., None], 0.0)
    return np.where(valid[..., None], pp, 0.0), pn, valid


def fit_circle_direct(points: np.ndarray, normals: np.ndarray):
    """Closed-form least-squares circle through oriented point samples.

    Minimizes sum_i |P_i - r N_i - C|^2 over (r, C); the stationary
    conditions give r and then C directly:

        r = mean(N_i . (P_i - mean P)) / (1 - |mean N|^2)
        C = mean(P) - r * mean(N)

    Inward-pointing normals come out as negative r; the returned radius is
    its absolute value while C and the residuals use the signed solution,
    which keeps them consistent.

    Args:
        points: (m, 3) projected sample positions, m >= 2.
        normals: (m, 3) unit normals projected into the same plane.

    Returns:
        (radius, center, residuals): positive radius, circle center (3,),
        and per-sample |P_i - r N_i - C| distances (m,).

    Raises:
        FlatSurfaceError: the normal equations are singular because the
            normals (nearly) agree, meaning the samples describe a plane.
    """
    points = np.asarray(points, dtype=np.float64)
    normals = np.asarray(normals, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] < 2:
        raise InputError(f"circle fit needs >= 2 samples, got shape {points.shape}")
    r, c, resid, ok = _fit_circles_batch(points[None], normals[None])
    if not ok[0]:
        raise FlatSurfaceError("circle-fit denominator vanished: samples describe a plane")
    return float(abs(r[0])), c[0], resid[0]


def _fit_circles_batch(points: np.ndarray, normals: np.ndarray):
    """Batched signed circle fits.

    Args:
        points, normals: (..., m, 3).

    Returns:
        (r_signed, center, residuals, ok) with shapes (...,), (..., 3),
        (..., m), (...,). Entries with ok == False are degenerate fits and
        hold unreliable values.
    """
    nbar = normals.mean(axis=-2)
    pbar = points.mean(axis=-2)
    den = 1.0 - np.einsum("...i,...i->...", nbar, nbar)
    num = np.einsum("...mi,...mi->...", normals, points - pbar[..., None, :]) / points.shape[-2]
    ok = np.abs(den) > _FLAT_DENOMINATOR
    safe_den = np.where(ok, den, 1.0)
    r = num / safe_den
    center = pbar - r[..., None] * nbar
    err = points - r[..., None, None] * normals - center[..., None, :]
    resid = np.linalg.norm(err, axis=-1)
    return r, center, resid, ok


@dataclass
class CircleSubsegment:
    """One RANSAC-extracted circular cross-section."""

    member_rows: np.ndarray  # indices into the segment's cell arrays
    radius: float  # positive
    radius_signed: float
    center: np.ndarray  # (3,) in the projected plane
    diagnostics: list = field(default_factory=list)


def sequential_ransac_cylinders(
    proj_points: np.ndarray,
    proj_normals: np.ndarray,
    cfg: FitConfig,
    rng: np.random.Generator,
    collect_diagnostics: bool = False,
) -> list[CircleSubsegment]:
    """Peel circular cross-sections off a projected segment one at a time.

    Every round draws ``ransac_iters`` 3-sample hypotheses (batched closed
    form), scores each with the MSAC truncated quadratic on relative
    residuals, keeps the best, refits on its inliers, and retires the
    refit's inliers. Rounds continue while enough samples remain and a
    hypothesis reaches the minimum sub-segment size.

    Args:
        proj_points, proj_normals: (n, 3) projection-valid samples.
        cfg: thresholds; ``inlier_rel_err`` bounds residual / |radius|.
        rng: per-segment deterministic stream.
        collect_diagnostics: record (iteration, best-so-far MSAC score)
            tuples per round for inspection.

    Returns:
        Sub-segments in extraction order; empty when no hypothesis ever
        gathers ``min_subsegment_cells`` inliers.
    """
    n = proj_points.shape[0]
    remaining = np.arange(n)
    out: list[CircleSubsegment] = []
    thr = cfg.inlier_rel_err

    while remaining.size >= cfg.min_subsegment_cells:
        pts = proj_points[remaining]
        nrm = proj_normals[remaining]
        m = remaining.size
        draws = np.stack([rng.choice(m, size=3, replace=False) for _ in range(cfg.ransac_iters)])
        r_h, c_h, _, ok_h = _fit_circles_batch(pts[draws], nrm[draws])

        # Residuals of every remaining sample under every hypothesis.
        err = pts[None] - r_h[:, None, None] * nrm[None] - c_h[:, None, :]
        rel = np.linalg.norm(err, axis=-1) / np.abs(np.where(ok_h, r_h, 1.0))[:, None]
        scores = np.sum(np.minimum(rel * rel, thr * thr), axis=-1)
        scores = np.where(ok_h & np.isfinite(scores), scores, np.inf)

        diag: list[tuple[int, float]] = []
        if collect_diagnostics:
            best_so_far = np.inf
            for it, s in enumerate(scores):
                if s < best_so_far:
                    best_so_far = float(s)
                diag.append((it, best_so_far))

        best = int(np.argmin(scores))
        if not np.isfinite(scores[best]):
            break
        inliers = rel[best] < thr
        if int(inliers.sum()) < cfg.min_subsegment_cells:
            break

        # Refit on the winning inliers, then re-evaluate membership once so
        # the final model defines its own support.
        r_f, c_f, _, ok_f = _fit_circles_batch(pts[inliers][None], nrm[inliers][None])
        if not ok_f[0]:
            # Inliers collapsed to a plane; leave them for arbitration as a
            # whole by treating the hypothesis support as final.
            r_s, c_fin, member = float(r_h[best]), c_h[best], inliers
        else:
            r_s, c_fin = float(r_f[0]), c_f[0]
            err_f = pts - r_s * nrm - c_fin
            member = np.linalg.norm(err_f, axis=-1) / abs(r_s) < thr
            if int(member.sum()) < cfg.min_subsegment_cells:
                member = inliers
        out.append(
            CircleSubsegment(
                member_rows=remaining[member],
                radius=abs(r_s),
                radius_signed=r_s,
                center=c_fin,
                diagnostics=diag,
            )
        )
        remaining = remaining[~member]
    return out


def arbitrate_subsegment(
    grid: CellGrid,
    cell_ids: np.ndarray,
    axis: np.ndarray,
    sub: CircleSubsegment,
    member_points: np.ndarray,
) -> tuple[str, PlaneModel | CylinderModel]:
    """Decide plane vs cylinder for one sub-segment by comparing MSEs.

    The cylinder MSE is the mean squared deviation of the member pixels'
    axis distance from the fitted radius; the plane MSE comes from the
    pooled plane fit of the same cells. Ties go to the plane (the simpler
    model).

    Args:
        grid: source cell grid.
        cell_ids: flat ids of the sub-segment's cells.
        axis: segment extrusion axis (unit).
        sub: fitted cross-section.
        member_points: (k, 3) pixel-level points of the member cells.

    Returns:
        ("plane", PlaneModel) or ("cylinder", CylinderModel); masks cover
        the member cells, pixel data is filled in later by refinement.
    """
    mask = np.zeros((grid.rows, grid.cols), dtype=bool)
    mask.ravel()[cell_ids] = True
    try:
        plane_fit = fit_cell_union(grid, mask)
        mse_plane = plane_fit.mse
    except DegenerateFitError:
        plane_fit, mse_plane = None, np.inf

    rel = member_points - sub.center
    axial = rel @ axis
    radial_dist = np.linalg.norm(rel - axial[:, None] * axis, axis=-1)
    mse_cyl = float(np.mean(np.square(radial_dist - sub.radius)))

    if plane_fit is not None and mse_plane <= mse_cyl:
        return "plane", PlaneModel(normal=plane_fit.normal, d=plane_fit.d, mse=mse_plane, cell_mask=mask)

    span = member_points @ axis
    t_lo, t_hi = float(span.min()), float(span.max())
    if t_hi - t_lo <= 0.0:
        # Zero extent along the axis cannot anchor two distinct points.
        if plane_fit is None:
            raise DegenerateFitError("sub-segment is degenerate under both models")
        return "plane", PlaneModel(normal=plane_fit.normal, d=plane_fit.d, mse=mse_plane, cell_mask=mask)
    model = CylinderModel(
        axis=axis.copy(),
        point_a=sub.center + t_lo * axis,
        point_b=sub.center + t_hi * axis,
        radius=sub.radius,
        mse=mse_cyl,
        cell_mask=mask,
    )
    return "cylinder", model


def merge_coplanar_planes(planes: list[PlaneModel], grid: CellGrid, cfg: FitConfig) -> list[PlaneModel]:
    """Fuse planes that describe the same surface across segment borders.

    Two planes merge when their normals agree within the merge gate, their
    offsets differ by less than max(3 * sqrt(max MSE), offset floor), and
    their cell masks touch 4-adjacently. Merging is transitive; each fused
    group is refit from pooled moments. Output order follows the smallest
    input index of each group.
    """
    n = len(planes)
    if n <= 1:
        return list(planes)
    parent = list(range(n))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            a, b = planes[i], planes[j]
            if float(a.normal @ b.normal) <= cfg.merge_normal_dot:
                continue
            gate = max(3.0 * np.sqrt(max(a.mse, b.mse)), cfg.merge_offset_floor)
            if abs(a.d - b.d) >= gate:
                continue
            if not _masks_touch(a.cell_mask, b.cell_mask):
                continue
            ri, rj = find(i), find(j)
            if ri != rj:
                parent[max(ri, rj)] = min(ri, rj)

    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)

    out: list[PlaneModel] = []
    for root in sorted(groups):
        members = groups[root]
        if len(members) == 1:
            out.append(planes[members[0]])
            continue
        mask = np.zeros_like(planes[members[0]].cell_mask)
        for i in members:
            mask |= planes[i].cell_mask
        fit = fit_cell_union(grid, mask)
        out.append(PlaneModel(normal=fit.normal, d=fit.d, mse=fit.mse, cell_mask=mask))
    return out


def _masks_touch(a: np.ndarray, b: np.ndarray) -> bool:
    """True when some cell of ``a`` is 4-adjacent to (or shares) a cell of ``b``."""
    grown = a.copy()
    grown[1:, :] |= a[:-1, :]
    grown[:-1, :] |= a[1:, :]
    grown[:, 1:] |= a[:, :-1]
    grown[:, :-1] |= a[:, 1:]
    return bool((grown & b).any())


@dataclass
class SegmentFitResult:
    planes: list[PlaneModel]
    cylinders: list[CylinderModel]
    discarded_cell_ids: np.ndarray  # flat ids rejected by every model


def fit_segment(
    grid: CellGrid,
    mask: np.ndarray,
    cell_pixel_points,
    cfg: FitConfig,
    rng: np.random.Generator,
) -> SegmentFitResult:
    """Run the model-selection cascade on one grown segment.

    Args:
        grid: cell grid.
        mask: (rows, cols) bool segment membership.
        cell_pixel_points: callable mapping an array of flat cell ids to the
            (k, 3) valid pixel points inside those cells.
        cfg: fit thresholds.
        rng: deterministic stream for this segment.
    """
    cell_ids = np.flatnonzero(mask.ravel())
    score, fit = plane_score(grid, mask)
    if score > cfg.plane_min_score:
        plane = PlaneModel(normal=fit.normal, d=fit.d, mse=fit.mse, cell_mask=mask.copy())
        return SegmentFitResult([plane], [], np.empty(0, dtype=np.int64))

    normals = grid.normal.reshape(-1, 3)[cell_ids]
    axis, extrusion = extrusion_test(normals)
    if not (extrusion > cfg.extrusion_min_score):
        return SegmentFitResult([], [], cell_ids)

    centroids = grid.centroid.reshape(-1, 3)[cell_ids]
    pp, pn, valid = project_to_plane(centroids, normals, axis)
    usable = np.flatnonzero(valid)
    if usable.size < cfg.min_subsegment_cells:
        return SegmentFitResult([], [], cell_ids)

    subs = sequential_ransac_cylinders(pp[usable], pn[usable], cfg, rng)
    planes: list[PlaneModel] = []
    cylinders: list[CylinderModel] = []
    claimed = np.zeros(cell_ids.size, dtype=bool)
    for sub in subs:
        rows = usable[sub.member_rows]
        claimed[rows] = True
        member_cells = cell_ids[rows]
        points = cell_pixel_points(member_cells)
        kind, model = arbitrate_subsegment(grid, member_cells, axis, sub, points)
        if kind == "plane":
            planes.append(model)
        else:
            cylinders.append(model)
    return SegmentFitResult(planes, cylinders, cell_ids[~claimed])
