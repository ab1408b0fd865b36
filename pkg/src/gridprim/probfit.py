"""Probabilistic cylinder refinement on raw segment pixels.

The direct cell-level fit is biased by patch averaging; this module refits
the cylinder on (subsampled) member pixels with a weighted least-squares
point-to-surface cost and recovers a parameter covariance.

A cylinder has 5 degrees of freedom but two axis points have 6, so one
coordinate of each point is frozen (the same index for both): the axis
coordinate of largest extent, which the axis can never be orthogonal to.
The free parameter vector is xi = (A_i, A_j, B_i, B_j, r).

Residual per point: distance to the axis line minus the radius,

    res_i = |(B - A) x (A - P_i)| / |B - A| - r

with analytic Jacobians in both the parameters and the point, the latter
feeding first-order uncertainty propagation: Sigma_xi = (J^T Sigma_r^-1 J)^-1
where Sigma_r is the diagonal of propagated per-point residual variances.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .camera import depth_sigma
from .errors import DegenerateFitError, InputError
from .fitting import CylinderModel

_MIN_AXIS_DIST = 1e-12  # guards points sitting numerically on the axis


@dataclass(frozen=True)
class ProbFitConfig:
    subsample_step: int = 5  # pixel grid stride over the segment mask
    max_iters: int = 50
    damping_init: float = 1e-4  # Levenberg damping; x10 on reject, /10 on accept
    cost_rel_tol: float = 1e-8  # relative cost decrease declaring convergence
    step_tol: float = 1e-10  # parameter step norm declaring convergence
    sigma_coeff: float = 1.425e-3  # depth noise model sigma(z) = coeff * z^2


@dataclass
class CylinderParam:
    """Gauge-fixed 5-parameter cylinder state."""

    fixed_axis: int  # coordinate index frozen in both points
    fixed_a: float  # frozen coordinate value of point A
    fixed_b: float  # frozen coordinate value of point B
    xi: np.ndarray  # (5,) free parameters (A_i, A_j, B_i, B_j, r)

    def free_axes(self) -> tuple[int, int]:
        i, j = [k for k in range(3) if k != self.fixed_axis]
        return i, j

    def points(self) -> tuple[np.ndarray, np.ndarray]:
        i, j = self.free_axes()
        a = np.zeros(3)
        b = np.zeros(3)
        a[i], a[j] = self.xi[0], self.xi[1]
        b[i], b[j] = self.xi[2], self.xi[3]
        a[self.fixed_axis] = self.fixed_a
        b[self.fixed_axis] = self.fixed_b
        return a, b

    @property
    def radius(self) -> float:
        return float(self.xi[4])


@dataclass
class ProbFitResult:
    param: CylinderParam
    cost: float
    iterations: int
    converged: bool


def init_param(model: CylinderModel, forced_axis: int | None = None) -> CylinderParam:
    """Build the gauge-fixed state from a direct-fit model.

    The frozen coordinate is the one with the largest |B - A| component
    (lowest index on ties) unless ``forced_axis`` overrides it, which tests
    use to verify gauge independence.
    """
    a = np.asarray(model.point_a, dtype=np.float64)
    b = np.asarray(model.point_b, dtype=np.float64)
    extent = np.abs(b - a)
    if float(extent.max()) <= 0.0:
        raise DegenerateFitError("cylinder axis has zero extent; cannot fix a gauge")
    k = int(np.argmax(extent)) if forced_axis is None else int(forced_axis)
    if not 0 <= k <= 2:
        raise InputError(f"gauge axis must be 0..2, got {k}")
    if abs(b[k] - a[k]) <= 0.0:
        raise DegenerateFitError(f"axis extent along coordinate {k} is zero; gauge unusable")
    i, j = [m for m in range(3) if m != k]
    xi = np.array([a[i], a[j], b[i], b[j], model.radius], dtype=np.float64)
    return CylinderParam(fixed_axis=k, fixed_a=float(a[k]), fixed_b=float(b[k]), xi=xi)


def residuals(param: CylinderParam, points: np.ndarray) -> np.ndarray:
    """Signed point-to-surface distances, (m,)."""
    a, b = param.points()
    u = b - a
    length = np.linalg.norm(u)
    if length <= 0.0:
        raise DegenerateFitError("degenerate state: axis points coincide")
    c = np.cross(np.broadcast_to(u, points.shape), a - points)
    return np.linalg.norm(c, axis=-1) / length - param.radius


def residual_jacobians(param: CylinderParam, points: np.ndarray):
    """Residuals with analytic Jacobians.

    Returns:
        (res, j_xi, j_p): residuals (m,), Jacobian wrt the free parameters
        (m, 5), and Jacobian wrt each point (m, 3).
    """
    a, b = param.points()
    u = b - a
    length = float(np.linalg.norm(u))
    if length <= 0.0:
        raise DegenerateFitError("degenerate state: axis points coincide")
    q = a - points  # (m, 3)
    c = np.cross(np.broadcast_to(u, q.shape), q)
    g = np.linalg.norm(c, axis=-1)
    g = np.maximum(g, _MIN_AXIS_DIST)
    res = g / length - param.radius

    cxq = np.cross(c, q)
    cxu = np.cross(c, np.broadcast_to(u, c.shape))
    gl = (g * length)[:, None]
    radial = (g / length**3)[:, None] * u
    d_a = (cxq + cxu) / gl + radial  # (m, 3)
    d_b = -cxq / gl - radial
    d_p = -cxu / gl

    i, j = param.free_axes()
    j_xi = np.empty((points.shape[0], 5))
    j_xi[:, 0] = d_a[:, i]
    j_xi[:, 1] = d_a[:, j]
    j_xi[:, 2] = d_b[:, i]
    j_xi[:, 3] = d_b[:, j]
    j_xi[:, 4] = -1.0
    return res, j_xi, d_p


def optimize(
    param: CylinderParam,
    points: np.ndarray,
    weights: np.ndarray,
    cfg: ProbFitConfig = ProbFitConfig(),
) -> ProbFitResult:
    """Damped Gauss-Newton minimization of sum_i w_i res_i^2.

    The damping factor multiplies by 10 on a rejected step and divides by
    10 on an accepted one. Convergence: relative cost decrease below
    ``cost_rel_tol`` or step norm below ``step_tol``; otherwise the result
    comes back with ``converged=False`` after ``max_iters``.
    """
    points = np.asarray(points, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise InputError(f"points must be (m, 3), got {points.shape}")
    if weights.shape != (points.shape[0],):
        raise InputError(f"weights must be ({points.shape[0]},), got {weights.shape}")
    if points.shape[0] < 5:
        raise DegenerateFitError(f"5-parameter fit needs >= 5 points, got {points.shape[0]}")

    state = replace(param, xi=param.xi.copy())
    res = residuals(state, points)
    cost = float(np.sum(weights * res * res))
    damping = cfg.damping_init

    for it in range(1, cfg.max_iters + 1):
        if cost == 0.0:
            return ProbFitResult(state, cost, it - 1, True)
        res, j_xi, _ = residual_jacobians(state, points)
        jt_w = j_xi.T * weights
        h = jt_w @ j_xi
        grad = jt_w @ res
        stepped = False
        for _ in range(24):
            try:
                delta = np.linalg.solve(h + damping * np.eye(5), -grad)
            except np.linalg.LinAlgError:
                damping *= 10.0
                continue
            trial = replace(state, xi=state.xi + delta)
            trial_cost = float(np.sum(weights * np.square(residuals(trial, points))))
            if trial_cost <= cost:
                stepped = True
                break
            damping *= 10.0
        if not stepped:
            return ProbFitResult(state, cost, it, False)
        damping = max(damping / 10.0, 1e-15)
        rel_drop = (cost - trial_cost) / cost if cost > 0.0 else 0.0
        state, cost = trial, trial_cost
        if float(np.linalg.norm(delta)) < cfg.step_tol or rel_drop < cfg.cost_rel_tol:
            return ProbFitResult(state, cost, it, True)
    return ProbFitResult(state, cost, cfg.max_iters, False)


def point_variances(points: np.ndarray, sigma_coeff: float) -> np.ndarray:
    """Diagonal per-point position covariances from the depth noise model.

    Depth uncertainty sigma(z) maps through back-projection to X and Y with
    factors X/Z and Y/Z; correlations are dropped (diagonal model).

    Returns:
        (m, 3) variances per coordinate.
    """
    z = points[:, 2]
    if np.any(z <= 0.0):
        raise InputError("points must have positive depth")
    sz2 = np.square(depth_sigma(z, sigma_coeff))
    return np.stack([np.square(points[:, 0] / z) * sz2, np.square(points[:, 1] / z) * sz2, sz2], axis=-1)


def backpropagate_uncertainty(
    param: CylinderParam,
    points: np.ndarray,
    sigma_coeff: float = 1.425e-3,
) -> tuple[np.ndarray, float]:
    """First-order parameter covariance at the solution.

    Sigma_xi = (J^T Sigma_r^-1 J)^-1 with Sigma_r the diagonal matrix of
    per-point residual variances, themselves propagated from the point
    covariance model through the residual's point Jacobian.

    Returns:
        (cov, var_radius): (5, 5) covariance of xi and its radius entry.

    Raises:
        DegenerateFitError: the information matrix is singular (e.g. all
            points on one circle cross-section).
    """
    _, j_xi, j_p = residual_jacobians(param, points)
    pv = point_variances(points, sigma_coeff)
    res_var = np.einsum("mi,mi->m", np.square(j_p), pv)
    res_var = np.maximum(res_var, 1e-30)
    info = (j_xi.T / res_var) @ j_xi
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError as exc:
        raise DegenerateFitError("singular information matrix in uncertainty propagation") from exc
    cond = np.linalg.cond(info)
    if not np.isfinite(cond) or cond > 1e14:
        raise DegenerateFitError(f"information matrix close to singular (cond={cond:.3g})")
    return cov, float(cov[4, 4])


def endpoint_covariance(param: CylinderParam, cov: np.ndarray) -> np.ndarray:
    """Embed the gauge-fixed covariance into (A, B) coordinates, (6, 6).

    Frozen coordinates carry zero variance by definition of the gauge.
    """
    i, j = param.free_axes()
    full = np.zeros((6, 6))
    idx = [i, j, 3 + i, 3 + j]
    full[np.ix_(idx, idx)] = cov[:4, :4]
    return full


def subsample_pixels(mask: np.ndarray, step: int) -> tuple[np.ndarray, np.ndarray]:
    """Grid-subsample a pixel mask, anchored at its bounding-box origin.

    Returns:
        (rows, cols) of kept pixels, row-major order.
    """
    if step < 1:
        raise InputError(f"subsample step must be >= 1, got {step}")
    row_any = mask.any(axis=1)
    if not row_any.any():
        empty = np.empty(0, dtype=np.int64)
        return empty, empty
    r0 = int(np.argmax(row_any))
    c0 = int(np.argmax(mask.any(axis=0)))
    rr, cc = np.nonzero(mask[r0::step, c0::step])
    return r0 + rr * step, c0 + cc * step


def refine_cylinder(model: CylinderModel, cloud_points: np.ndarray, cfg: ProbFitConfig = ProbFitConfig()) -> CylinderModel:
    """Refit a cylinder on its (already subsampled) member pixel points.

    Returns a copy of ``model`` with axis, endpoints, radius, and the
    uncertainty fields replaced. The segment masks, MSE, and pixel counts
    are kept as segmentation metadata.
    """
    param = init_param(model)
    z = cloud_points[:, 2]
    weights = 1.0 / np.square(depth_sigma(z, cfg.sigma_coeff))
    result = optimize(param, cloud_points, weights, cfg)
    cov, var_r = backpropagate_uncertainty(result.param, cloud_points, cfg.sigma_coeff)
    a, b = result.param.points()
    axis = b - a
    axis = axis / np.linalg.norm(axis)
    refined = replace(
        model,
        axis=axis,
        point_a=a,
        point_b=b,
        radius=abs(result.param.radius),
        var_radius=var_r,
        param_cov=cov,
        endpoint_cov=endpoint_covariance(result.param, cov),
        gauge_axis=result.param.fixed_axis,
    )
    return refined
