"""Frame-to-frame pose estimation from matched planes and cylinders.

The pose (R, t) maps current-frame points into the previous frame:
p_prev = R p_curr + t. Matched features contribute residuals that vanish
exactly when the transformed current feature coincides with the previous
one:

    cylinders: r_c = [(B - A) x (A - R A' - t); (B - A) x (A - R B' - t)]
               with {A, B} the previous-frame axis points and {A', B'} the
               current-frame ones;
    planes:    r_p = s (R^T N') - d N, s = N'^T t + d', with (N', d') the
               previous-frame plane and (N, d) the current-frame plane.

The weighted cost  alpha_p * sum r_p^T W_p r_p + alpha_c * sum r_c^T W_c r_c
is minimized by Gauss-Newton on a left-multiplicative axis-angle increment,
with per-residual weights recomputed each iteration as inverse first-order
residual variances propagated from the feature parameter covariances.
Configurations that leave fewer than six constrained degrees of freedom
raise instead of silently solving.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, UnderConstrainedError


@dataclass(frozen=True)
class MatchConfig:
    max_axis_angle: float = float(np.pi / 6.0)  # cylinder axis gate, radians
    max_radius_mahalanobis: float = 2000.0  # (r1-r2)^2 / (var1+var2) gate
    min_normal_dot: float = float(np.cos(np.pi / 6.0))  # plane normal gate
    max_plane_offset: float = 0.2  # |d1-d2| gate, meters
    min_overlap_ratio: float = 0.5  # of the smaller segment's pixel count


@dataclass(frozen=True)
class PoseConfig:
    alpha_plane: float = 0.01
    alpha_cylinder: float = 0.1
    max_iters: int = 50
    step_tol: float = 1e-10
    var_floor: float = 1e-12  # lower bound on propagated residual variances
    rank_rel_tol: float = 1e-10  # eigenvalue ratio declaring a null direction


@dataclass
class PlaneFeature:
    """Plane N . p + d = 0 with segmentation metadata for matching."""

    normal: np.ndarray  # (3,) unit, camera-facing
    d: float
    mse: float = 0.0
    n_pixels: int = 1
    label: int = 0  # value in the frame's label image

    def param_variance(self, floor: float) -> float:
        # Isotropic (N, d) covariance proxy: per-point residual variance
        # divided by the support size, floored for noise-free data.
        return max(self.mse / max(self.n_pixels, 1), floor)


@dataclass
class CylinderFeature:
    """Cylinder axis segment with uncertainty for matching and weighting."""

    point_a: np.ndarray  # (3,)
    point_b: np.ndarray  # (3,)
    radius: float
    var_radius: float = 0.0
    endpoint_cov: np.ndarray | None = None  # (6, 6) covariance of (A, B)
    n_pixels: int = 1
    label: int = 0

    def axis(self) -> np.ndarray:
        u = self.point_b - self.point_a
        n = np.linalg.norm(u)
        if n <= 0.0:
            raise InputError("cylinder feature with coincident axis points")
        return u / n

    def endpoint_covariance(self, floor: float) -> np.ndarray:
        if self.endpoint_cov is not None:
            return self.endpoint_cov
        return max(self.var_radius, floor) * np.eye(6)


@dataclass
class FrameFeatures:
    """Extraction output of one frame, as needed for inter-frame matching."""

    planes: list[PlaneFeature]
    cylinders: list[CylinderFeature]
    labels: np.ndarray | None = None  # (H, W) int label image


@dataclass
class Pose:
    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def quaternion(self) -> np.ndarray:
        """(qx, qy, qz, qw), unit, qw >= 0."""
        return quaternion_from_matrix(self.rotation)


@dataclass
class PoseResult:
    pose: Pose
    cost: float
    iterations: int
    converged: bool
    # (cost_before, cost_after, step_norm) per accepted iteration, costs
    # evaluated under that iteration's weights.
    diagnostics: list[tuple[float, float, float]] = field(default_factory=list)


def skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def rotation_exp(omega: np.ndarray) -> np.ndarray:
    """Rodrigues exponential of an axis-angle 3-vector."""
    theta = float(np.linalg.norm(omega))
    k = skew(omega)
    if theta < 1e-9:
        return np.eye(3) + k + 0.5 * (k @ k)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * k + b * (k @ k)


def quaternion_from_matrix(r: np.ndarray) -> np.ndarray:
    """Unit quaternion (qx, qy, qz, qw) of a rotation matrix, qw >= 0."""
    m = np.asarray(r, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0.0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array([(m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s, 0.25 * s])
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array([0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s, (m[2, 1] - m[1, 2]) / s])
    elif m[1, 1] >= m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array([(m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s, (m[0, 2] - m[2, 0]) / s])
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array([(m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s, (m[1, 0] - m[0, 1]) / s])
    q /= np.linalg.norm(q)
    return -q if q[3] < 0.0 else q


def matrix_from_quaternion(q: np.ndarray) -> np.ndarray:
    x, y, z, w = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


# ---------------------------------------------------------------------------
# Residuals


def plane_residual(pose: Pose, prev: PlaneFeature, curr: PlaneFeature) -> np.ndarray:
    """3-vector plane alignment residual (zero iff the match is consistent)."""
    s = float(prev.normal @ pose.translation + prev.d)
    return s * (pose.rotation.T @ prev.normal) - curr.d * curr.normal


def cylinder_residual(pose: Pose, prev: CylinderFeature, curr: CylinderFeature) -> np.ndarray:
    """6-vector axis alignment residual stacking both transformed endpoints."""
    w = prev.point_b - prev.point_a
    ta = pose.apply(curr.point_a)
    tb = pose.apply(curr.point_b)
    return np.concatenate([np.cross(w, prev.point_a - ta), np.cross(w, prev.point_a - tb)])


def _plane_jacobian(pose: Pose, prev: PlaneFeature, curr: PlaneFeature) -> np.ndarray:
    """(3, 6) Jacobian in the (rotation, translation) increment."""
    s = float(prev.normal @ pose.translation + prev.d)
    m = pose.rotation.T @ prev.normal
    j = np.zeros((3, 6))
    j[:, :3] = s * (pose.rotation.T @ skew(prev.normal))
    j[:, 3:] = np.outer(m, prev.normal)
    return j


def _cylinder_jacobian(pose: Pose, prev: CylinderFeature, curr: CylinderFeature) -> np.ndarray:
    """(6, 6) Jacobian in the (rotation, translation) increment."""
    w = prev.point_b - prev.point_a
    sw = skew(w)
    j = np.zeros((6, 6))
    for row, p in ((0, curr.point_a), (3, curr.point_b)):
        rp = pose.rotation @ p
        j[row : row + 3, :3] = sw @ skew(rp)
        j[row : row + 3, 3:] = -sw
    return j


def _plane_residual_variance(pose: Pose, prev: PlaneFeature, curr: PlaneFeature, floor: float) -> np.ndarray:
    """Per-component variance of r_p propagated from both planes' parameters."""
    m = pose.rotation.T @ prev.normal
    s = float(prev.normal @ pose.translation + prev.d)
    d_nprev = np.outer(m, pose.translation) + s * pose.rotation.T  # (3, 3)
    d_dprev = m  # (3,)
    var_prev = prev.param_variance(floor)
    var_curr = curr.param_variance(floor)
    var = var_prev * (np.sum(d_nprev**2, axis=1) + d_dprev**2)
    var += var_curr * (curr.d**2 + curr.normal**2)
    return np.maximum(var, floor)


def _cylinder_residual_variance(
    pose: Pose, prev: CylinderFeature, curr: CylinderFeature, floor: float
) -> np.ndarray:
    """Per-component variance of r_c propagated from both axis-point pairs."""
    w = prev.point_b - prev.point_a
    sw = skew(w)
    qa = prev.point_a - pose.apply(curr.point_a)
    qb = prev.point_a - pose.apply(curr.point_b)
    j_prev = np.zeros((6, 6))
    j_prev[:3, :3] = skew(qa) + sw
    j_prev[:3, 3:] = -skew(qa)
    j_prev[3:, :3] = skew(qb) + sw
    j_prev[3:, 3:] = -skew(qb)
    swr = -sw @ pose.rotation
    j_curr = np.zeros((6, 6))
    j_curr[:3, :3] = swr
    j_curr[3:, 3:] = swr
    cov_prev = prev.endpoint_covariance(floor)
    cov_curr = curr.endpoint_covariance(floor)
    var = np.diag(j_prev @ cov_prev @ j_prev.T) + np.diag(j_curr @ cov_curr @ j_curr.T)
    return np.maximum(var, floor)


# ---------------------------------------------------------------------------
# Matching


def _label_sizes(labels: np.ndarray) -> np.ndarray:
    return np.bincount(labels.ravel())


def _overlaps(prev_labels: np.ndarray, curr_labels: np.ndarray) -> dict[tuple[int, int], int]:
    """Pixel counts of co-labeled regions across two aligned label images."""
    if prev_labels.shape != curr_labels.shape:
        raise InputError(f"label image shapes differ: {prev_labels.shape} vs {curr_labels.shape}")
    both = (prev_labels > 0) & (curr_labels > 0)
    if not both.any():
        return {}
    n_curr = int(curr_labels.max()) + 1
    joint = prev_labels[both].astype(np.int64) * n_curr + curr_labels[both]
    counts = np.bincount(joint)
    out = {}
    for flat in np.flatnonzero(counts):
        out[(int(flat // n_curr), int(flat % n_curr))] = int(counts[flat])
    return out


def _greedy(pairs: list[tuple[int, int, int]]) -> list[tuple[int, int]]:
    """One-to-one assignment preferring larger overlap; index order on ties."""
    chosen: list[tuple[int, int]] = []
    used_i: set[int] = set()
    used_j: set[int] = set()
    for ov, i, j in sorted(((ov, i, j) for i, j, ov in pairs), key=lambda t: (-t[0], t[1], t[2])):
        if i not in used_i and j not in used_j:
            chosen.append((i, j))
            used_i.add(i)
            used_j.add(j)
    return chosen


def match_cylinders(prev: FrameFeatures, curr: FrameFeatures, cfg: MatchConfig = MatchConfig()) -> list[tuple[int, int]]:
    """Greedy one-to-one cylinder matches (prev index, curr index).

    Gates: acute angle between axes below ``max_axis_angle``, squared radius
    difference below ``max_radius_mahalanobis`` in units of the summed radius
    variances, and label overlap above ``min_overlap_ratio`` of the smaller
    segment. Overlap requires both frames' label images.
    """
    if prev.labels is None or curr.labels is None:
        raise InputError("cylinder matching needs label images in both frames")
    overlaps = _overlaps(prev.labels, curr.labels)
    candidates: list[tuple[int, int, int]] = []
    for i, a in enumerate(prev.cylinders):
        for j, b in enumerate(curr.cylinders):
            dot = abs(float(a.axis() @ b.axis()))
            if np.arccos(np.clip(dot, -1.0, 1.0)) >= cfg.max_axis_angle:
                continue
            var = max(a.var_radius + b.var_radius, 1e-300)
            if (a.radius - b.radius) ** 2 / var >= cfg.max_radius_mahalanobis:
                continue
            ov = overlaps.get((a.label, b.label), 0)
            if ov <= cfg.min_overlap_ratio * min(a.n_pixels, b.n_pixels):
                continue
            candidates.append((i, j, ov))
    return _greedy(candidates)


def match_planes(prev: FrameFeatures, curr: FrameFeatures, cfg: MatchConfig = MatchConfig()) -> list[tuple[int, int]]:
    """Greedy one-to-one plane matches (prev index, curr index)."""
    if prev.labels is None or curr.labels is None:
        raise InputError("plane matching needs label images in both frames")
    overlaps = _overlaps(prev.labels, curr.labels)
    candidates: list[tuple[int, int, int]] = []
    for i, a in enumerate(prev.planes):
        for j, b in enumerate(curr.planes):
            if float(a.normal @ b.normal) <= cfg.min_normal_dot:
                continue
            if abs(a.d - b.d) >= cfg.max_plane_offset:
                continue
            ov = overlaps.get((a.label, b.label), 0)
            if ov <= cfg.min_overlap_ratio * min(a.n_pixels, b.n_pixels):
                continue
            candidates.append((i, j, ov))
    return _greedy(candidates)


# ---------------------------------------------------------------------------
# Pose solve


def pose_cost(
    pose: Pose,
    plane_matches: list[tuple[PlaneFeature, PlaneFeature]],
    cylinder_matches: list[tuple[CylinderFeature, CylinderFeature]],
    cfg: PoseConfig = PoseConfig(),
    weights: list[np.ndarray] | None = None,
) -> float:
    """Weighted cost at ``pose``; recomputes weights there unless given."""
    if weights is None:
        weights = _all_weights(pose, plane_matches, cylinder_matches, cfg)
    total = 0.0
    for (prev, curr), w in zip(plane_matches, weights[: len(plane_matches)]):
        r = plane_residual(pose, prev, curr)
        total += cfg.alpha_plane * float(r @ (w * r))
    for (prev, curr), w in zip(cylinder_matches, weights[len(plane_matches) :]):
        r = cylinder_residual(pose, prev, curr)
        total += cfg.alpha_cylinder * float(r @ (w * r))
    return total


def _all_weights(pose, plane_matches, cylinder_matches, cfg) -> list[np.ndarray]:
    ws: list[np.ndarray] = []
    for prev, curr in plane_matches:
        ws.append(1.0 / _plane_residual_variance(pose, prev, curr, cfg.var_floor))
    for prev, curr in cylinder_matches:
        ws.append(1.0 / _cylinder_residual_variance(pose, prev, curr, cfg.var_floor))
    return ws


def estimate_pose(
    plane_matches: list[tuple[PlaneFeature, PlaneFeature]],
    cylinder_matches: list[tuple[CylinderFeature, CylinderFeature]],
    cfg: PoseConfig = PoseConfig(),
) -> PoseResult:
    """Gauss-Newton pose solve over matched features.

    Args:
        plane_matches: (previous, current) plane feature pairs.
        cylinder_matches: (previous, current) cylinder feature pairs.
        cfg: weighting and convergence parameters.

    Returns:
        PoseResult whose pose maps current-frame points to the previous
        frame. ``diagnostics`` records per-iteration cost behavior.

    Raises:
        UnderConstrainedError: no matches at all, or the stacked normal
            matrix leaves one or more increment directions unconstrained
            (lists them).
    """
    if not plane_matches and not cylinder_matches:
        raise UnderConstrainedError("no matches: pose is fully unconstrained", null_directions=np.eye(6))
    pose = Pose.identity()
    diagnostics: list[tuple[float, float, float]] = []
    converged = False
    iterations = 0
    cost_after = np.nan

    for iterations in range(1, cfg.max_iters + 1):
        weights = _all_weights(pose, plane_matches, cylinder_matches, cfg)
        h = np.zeros((6, 6))
        g = np.zeros(6)
        for (prev, curr), w in zip(plane_matches, weights[: len(plane_matches)]):
            r = plane_residual(pose, prev, curr)
            j = _plane_jacobian(pose, prev, curr)
            jw = j.T * w
            h += cfg.alpha_plane * (jw @ j)
            g += cfg.alpha_plane * (jw @ r)
        for (prev, curr), w in zip(cylinder_matches, weights[len(plane_matches) :]):
            r = cylinder_residual(pose, prev, curr)
            j = _cylinder_jacobian(pose, prev, curr)
            jw = j.T * w
            h += cfg.alpha_cylinder * (jw @ j)
            g += cfg.alpha_cylinder * (jw @ r)

        if iterations == 1:
            _check_rank(h, cfg.rank_rel_tol)

        delta = np.linalg.solve(h, -g)
        cost_before = pose_cost(pose, plane_matches, cylinder_matches, cfg, weights)
        # Backtracking keeps the fixed-weight cost non-increasing.
        step = delta
        for _ in range(30):
            trial = Pose(rotation_exp(step[:3]) @ pose.rotation, pose.translation + step[3:])
            cost_after = pose_cost(trial, plane_matches, cylinder_matches, cfg, weights)
            if cost_after <= cost_before:
                break
            step = step * 0.5
        else:
            cost_after = cost_before
            diagnostics.append((cost_before, cost_before, 0.0))
            converged = True
            break
        pose = trial
        step_norm = float(np.linalg.norm(step))
        diagnostics.append((cost_before, cost_after, step_norm))
        if step_norm < cfg.step_tol:
            converged = True
            break
    return PoseResult(pose=pose, cost=float(cost_after), iterations=iterations, converged=converged, diagnostics=diagnostics)


def _check_rank(h: np.ndarray, rel_tol: float) -> None:
    w, v = np.linalg.eigh(h)
    lam_max = float(w[-1])
    if lam_max <= 0.0:
        raise UnderConstrainedError("pose normal matrix is zero", null_directions=np.eye(6))
    null = w < rel_tol * lam_max
    if null.any():
        dirs = v[:, null].T
        raise UnderConstrainedError(
            f"pose under-constrained: {int(null.sum())} free direction(s) in (rotation, translation) space",
            null_directions=dirs,
        )
