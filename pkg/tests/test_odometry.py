import numpy as np
import pytest

from gridprim.errors import InputError, UnderConstrainedError
from gridprim.odometry import (
    CylinderFeature,
    FrameFeatures,
    MatchConfig,
    PlaneFeature,
    Pose,
    PoseConfig,
    cylinder_residual,
    estimate_pose,
    match_cylinders,
    match_planes,
    matrix_from_quaternion,
    plane_residual,
    pose_cost,
    quaternion_from_matrix,
    rotation_exp,
)
from gridprim.odometry import _cylinder_jacobian, _plane_jacobian

from helpers import (
    rotation_about,
    rotation_angle_deg,
    transformed_cylinder,
    transformed_plane,
)


def plane(normal, d, **kw):
    n = np.asarray(normal, dtype=np.float64)
    return PlaneFeature(normal=n / np.linalg.norm(n), d=d, **kw)


def cylinder(point_a, point_b, radius, **kw):
    return CylinderFeature(
        point_a=np.asarray(point_a, dtype=np.float64),
        point_b=np.asarray(point_b, dtype=np.float64),
        radius=radius,
        **kw,
    )


def random_pose(rng, max_t=0.3, max_deg=20.0):
    axis = rng.standard_normal(3)
    angle = np.radians(rng.uniform(1.0, max_deg))
    rot = rotation_about(axis, angle)
    t = rng.uniform(-max_t, max_t, size=3)
    return rot, t


def frame_pair(rng, rot, t, normals_ds=(), cylinders=()):
    """Build matched (prev, curr) feature pairs under the ground-truth pose."""
    plane_pairs = []
    for n, d in normals_ds:
        nc, dc = transformed_plane(n, d, rot, t)
        plane_pairs.append((plane(n, d), plane(nc, dc)))
    cyl_pairs = []
    for axis, center, radius, half in cylinders:
        axis = np.asarray(axis, dtype=np.float64) / np.linalg.norm(axis)
        ac, cc = transformed_cylinder(axis, center, rot, t)
        prev = cylinder(center - half * axis, center + half * axis, radius)
        curr = cylinder(cc - half * ac, cc + half * ac, radius)
        cyl_pairs.append((prev, curr))
    return plane_pairs, cyl_pairs


# ---------------------------------------------------------------------------
# Residual geometry


def test_plane_residual_zero_for_identity_match():
    f = plane((0.0, 0.0, -1.0), 2.0)
    r = plane_residual(Pose.identity(), f, f)
    np.testing.assert_allclose(r, 0.0, atol=1e-15)


def test_plane_residual_zero_under_normal_translation():
    n = np.array([0.0, 0.0, -1.0])
    prev = plane(n, 1.5)
    t = 0.1 * n
    curr = plane(n, 1.5 + float(n @ t))
    r = plane_residual(Pose(np.eye(3), t), prev, curr)
    np.testing.assert_allclose(r, 0.0, atol=1e-15)


def test_plane_residual_zero_under_rotation_about_normal():
    n = np.array([0.0, 0.0, -1.0])
    prev = plane(n, 2.0)
    rot = rotation_about(n, np.radians(10.0))
    curr = plane(rot.T @ n, 2.0)
    r = plane_residual(Pose(rot, np.zeros(3)), prev, curr)
    np.testing.assert_allclose(r, 0.0, atol=1e-15)


def test_plane_residual_zero_under_general_transform():
    rng = np.random.default_rng(13)
    for _ in range(20):
        rot, t = random_pose(rng)
        n = rng.standard_normal(3)
        n /= np.linalg.norm(n)
        d = rng.uniform(0.5, 3.0)
        nc, dc = transformed_plane(n, d, rot, t)
        r = plane_residual(Pose(rot, t), plane(n, d), plane(nc, dc))
        np.testing.assert_allclose(r, 0.0, atol=1e-12)


def test_plane_residual_nonzero_when_wrong():
    prev = plane((0.0, 0.0, -1.0), 2.0)
    curr = plane((0.0, 0.0, -1.0), 2.1)
    r = plane_residual(Pose.identity(), prev, curr)
    assert np.linalg.norm(r) == pytest.approx(0.1, abs=1e-12)


def test_cylinder_residual_zero_for_identity_match():
    c = cylinder((-0.5, 0.0, 2.0), (0.5, 0.0, 2.0), 0.3)
    np.testing.assert_allclose(cylinder_residual(Pose.identity(), c, c), 0.0, atol=1e-15)


def test_cylinder_residual_invariant_to_axis_sliding():
    rng = np.random.default_rng(14)
    rot, t = random_pose(rng)
    axis = np.array([1.0, 0.2, -0.1])
    axis /= np.linalg.norm(axis)
    center = np.array([0.1, -0.3, 2.2])
    ac, cc = transformed_cylinder(axis, center, rot, t)
    prev = cylinder(center - 0.5 * axis, center + 0.5 * axis, 0.3)
    curr = cylinder(cc - 0.5 * ac, cc + 0.5 * ac, 0.3)
    pose = Pose(rot, t)
    base = cylinder_residual(pose, prev, curr)
    np.testing.assert_allclose(base, 0.0, atol=1e-12)
    slid = cylinder(curr.point_a + 0.37 * ac, curr.point_b - 0.21 * ac, 0.3)
    np.testing.assert_allclose(cylinder_residual(pose, prev, slid), base, atol=1e-12)


def test_cylinder_residual_magnitude_under_perpendicular_shift():
    prev = cylinder((-0.5, 0.0, 2.0), (0.5, 0.0, 2.0), 0.3)
    t = np.array([0.0, 0.1, 0.0])  # perpendicular to the x axis
    r = cylinder_residual(Pose(np.eye(3), t), prev, prev)
    w_norm = np.linalg.norm(prev.point_b - prev.point_a)
    assert np.linalg.norm(r[:3]) == pytest.approx(0.1 * w_norm, abs=1e-12)
    assert np.linalg.norm(r[3:]) == pytest.approx(0.1 * w_norm, abs=1e-12)


def test_cylinder_residual_ignores_axial_translation():
    prev = cylinder((-0.5, 0.0, 2.0), (0.5, 0.0, 2.0), 0.3)
    t = np.array([0.25, 0.0, 0.0])  # along the axis
    r = cylinder_residual(Pose(np.eye(3), t), prev, prev)
    np.testing.assert_allclose(r, 0.0, atol=1e-15)


# ---------------------------------------------------------------------------
# Jacobians vs finite differences (left-increment convention)


def perturbed(pose, eps6):
    return Pose(rotation_exp(eps6[:3]) @ pose.rotation, pose.translation + eps6[3:])


def test_plane_jacobian_matches_fd():
    rng = np.random.default_rng(15)
    h = 1e-7
    for _ in range(100):
        rot, t = random_pose(rng)
        pose = Pose(rot, t)
        n = rng.standard_normal(3)
        n /= np.linalg.norm(n)
        prev = plane(n, rng.uniform(0.5, 3.0))
        m = rng.standard_normal(3)
        m /= np.linalg.norm(m)
        curr = plane(m, rng.uniform(0.5, 3.0))
        j = _plane_jacobian(pose, prev, curr)
        for k in range(6):
            e = np.zeros(6)
            e[k] = h
            fd = (plane_residual(perturbed(pose, e), prev, curr)
                  - plane_residual(perturbed(pose, -e), prev, curr)) / (2 * h)
            assert np.abs(j[:, k] - fd).max() < 1e-5 * max(1.0, np.abs(fd).max())


def test_cylinder_jacobian_matches_fd():
    rng = np.random.default_rng(16)
    h = 1e-7
    for _ in range(100):
        rot, t = random_pose(rng)
        pose = Pose(rot, t)
        prev = cylinder(rng.uniform(-1, 1, 3) + [0, 0, 2], rng.uniform(-1, 1, 3) + [0, 0, 3], 0.3)
        curr = cylinder(rng.uniform(-1, 1, 3) + [0, 0, 2], rng.uniform(-1, 1, 3) + [0, 0, 3], 0.3)
        j = _cylinder_jacobian(pose, prev, curr)
        for k in range(6):
            e = np.zeros(6)
            e[k] = h
            fd = (cylinder_residual(perturbed(pose, e), prev, curr)
                  - cylinder_residual(perturbed(pose, -e), prev, curr)) / (2 * h)
            assert np.abs(j[:, k] - fd).max() < 1e-5 * max(1.0, np.abs(fd).max())


# ---------------------------------------------------------------------------
# Matching


def labels_pair(split=10, size=20):
    prev = np.zeros((size, size), dtype=np.int32)
    prev[:, :split] = 1
    prev[:, split:] = 2
    return prev, prev.copy()


def test_identical_frames_match_everything():
    prev_l, curr_l = labels_pair()
    planes = [plane((0.0, 0.0, -1.0), 2.0, n_pixels=200, label=1)]
    cyls = [cylinder((-0.5, 0.0, 2.0), (0.5, 0.0, 2.0), 0.3, n_pixels=200, label=2)]
    prev = FrameFeatures(planes, cyls, prev_l)
    curr = FrameFeatures([plane((0.0, 0.0, -1.0), 2.0, n_pixels=200, label=1)],
                         [cylinder((-0.5, 0.0, 2.0), (0.5, 0.0, 2.0), 0.3, n_pixels=200, label=2)],
                         curr_l)
    assert match_planes(prev, curr) == [(0, 0)]
    assert match_cylinders(prev, curr) == [(0, 0)]


def test_axis_angle_gate_rejects():
    prev_l, curr_l = labels_pair()
    a = cylinder((-0.5, 0.0, 2.0), (0.5, 0.0, 2.0), 0.3, n_pixels=200, label=1)
    rot45 = rotation_about((0.0, 0.0, 1.0), np.radians(45.0))
    b = cylinder(rot45 @ a.point_a, rot45 @ a.point_b, 0.3, n_pixels=200, label=1)
    assert match_cylinders(FrameFeatures([], [a], prev_l), FrameFeatures([], [b], curr_l)) == []


def test_radius_mahalanobis_gate_rejects():
    prev_l, curr_l = labels_pair()
    a = cylinder((-0.5, 0.0, 2.0), (0.5, 0.0, 2.0), 0.5, var_radius=1e-6, n_pixels=200, label=1)
    b = cylinder((-0.5, 0.0, 2.0), (0.5, 0.0, 2.0), 0.6, var_radius=1e-6, n_pixels=200, label=1)
    # (0.1)^2 / 2e-6 = 5000 >= 2000
    assert match_cylinders(FrameFeatures([], [a], prev_l), FrameFeatures([], [b], curr_l)) == []
    c = cylinder((-0.5, 0.0, 2.0), (0.5, 0.0, 2.0), 0.501, var_radius=1e-6, n_pixels=200, label=1)
    assert match_cylinders(FrameFeatures([], [a], prev_l), FrameFeatures([], [c], curr_l)) == [(0, 0)]


def test_parallel_walls_offset_apart_not_matched():
    prev_l, curr_l = labels_pair()
    a = plane((0.0, 0.0, -1.0), 2.0, n_pixels=200, label=1)
    b = plane((0.0, 0.0, -1.0), 3.0, n_pixels=200, label=1)
    assert match_planes(FrameFeatures([a], [], prev_l), FrameFeatures([b], [], curr_l)) == []


def test_slightly_moved_plane_matches():
    prev_l = np.zeros((20, 20), dtype=np.int32)
    prev_l[:, :10] = 1
    curr_l = np.zeros((20, 20), dtype=np.int32)
    curr_l[:, 2:12] = 1  # 80% overlap with prev region
    a = plane((0.0, 0.0, -1.0), 2.0, n_pixels=200, label=1)
    b = plane((0.0, 0.0, -1.0), 2.05, n_pixels=200, label=1)
    assert match_planes(FrameFeatures([a], [], prev_l), FrameFeatures([b], [], curr_l)) == [(0, 0)]


def test_low_overlap_rejected():
    prev_l = np.zeros((20, 20), dtype=np.int32)
    prev_l[:, :10] = 1
    curr_l = np.zeros((20, 20), dtype=np.int32)
    curr_l[:, 7:17] = 1  # 30% overlap
    a = plane((0.0, 0.0, -1.0), 2.0, n_pixels=200, label=1)
    b = plane((0.0, 0.0, -1.0), 2.0, n_pixels=200, label=1)
    assert match_planes(FrameFeatures([a], [], prev_l), FrameFeatures([b], [], curr_l)) == []


def test_greedy_is_one_to_one_preferring_overlap():
    prev_l = np.zeros((20, 20), dtype=np.int32)
    prev_l[:, :8] = 1
    prev_l[:, 8:20] = 2
    curr_l = np.zeros((20, 20), dtype=np.int32)
    curr_l[:, :20] = 1  # one segment overlapping both prev segments
    p1 = plane((0.0, 0.0, -1.0), 2.0, n_pixels=160, label=1)
    p2 = plane((0.0, 0.0, -1.0), 2.0, n_pixels=240, label=2)
    q = plane((0.0, 0.0, -1.0), 2.0, n_pixels=400, label=1)
    got = match_planes(FrameFeatures([p1, p2], [], prev_l), FrameFeatures([q], [], curr_l))
    assert got == [(1, 0)]  # 240-pixel overlap beats 160


def test_matching_requires_labels():
    prev = FrameFeatures([plane((0.0, 0.0, -1.0), 2.0)], [], None)
    curr = FrameFeatures([plane((0.0, 0.0, -1.0), 2.0)], [], np.zeros((4, 4), dtype=np.int32))
    with pytest.raises(InputError):
        match_planes(prev, curr)
    with pytest.raises(InputError):
        match_cylinders(prev, curr)


# ---------------------------------------------------------------------------
# Pose estimation


def test_three_orthogonal_planes_recover_pose():
    rng = np.random.default_rng(17)
    for _ in range(10):
        rot, t = random_pose(rng)
        plane_pairs, _ = frame_pair(
            rng, rot, t,
            normals_ds=[((0.0, 0.0, -1.0), 3.0), ((-1.0, 0.0, 0.0), 0.8), ((0.0, -1.0, 0.0), 0.6)],
        )
        result = estimate_pose(plane_pairs, [])
        assert result.converged
        assert np.abs(result.pose.translation - t).max() < 1e-8
        # Trace-based angle extraction bottoms out near sqrt(eps) radians.
        assert rotation_angle_deg(result.pose.rotation @ rot.T) < 1e-5


def test_two_cylinders_one_plane_recover_pose():
    rng = np.random.default_rng(18)
    for _ in range(10):
        rot, t = random_pose(rng)
        plane_pairs, cyl_pairs = frame_pair(
            rng, rot, t,
            normals_ds=[((0.0, 0.0, -1.0), 3.0)],
            cylinders=[
                ((1.0, 0.0, 0.0), (0.0, -0.4, 2.0), 0.3, 0.6),
                ((0.0, 1.0, 0.0), (0.5, 0.0, 2.4), 0.2, 0.5),
            ],
        )
        result = estimate_pose(plane_pairs, cyl_pairs)
        assert result.converged
        assert np.abs(result.pose.translation - t).max() < 1e-6
        assert rotation_angle_deg(result.pose.rotation @ rot.T) < 1e-4


def test_pose_cost_zero_at_truth_positive_elsewhere():
    rng = np.random.default_rng(19)
    rot, t = random_pose(rng)
    plane_pairs, cyl_pairs = frame_pair(
        rng, rot, t,
        normals_ds=[((0.0, 0.0, -1.0), 3.0), ((-1.0, 0.0, 0.0), 0.8)],
        cylinders=[((1.0, 0.0, 0.0), (0.0, -0.4, 2.0), 0.3, 0.6)],
    )
    # Weights near 1/var_floor amplify float noise into the 1e-20 range.
    assert pose_cost(Pose(rot, t), plane_pairs, cyl_pairs) < 1e-18
    assert pose_cost(Pose.identity(), plane_pairs, cyl_pairs) > 1e-3


def test_no_matches_fully_unconstrained():
    with pytest.raises(UnderConstrainedError) as exc:
        estimate_pose([], [])
    np.testing.assert_array_equal(exc.value.null_directions, np.eye(6))


def null_directions_leave_residuals_flat(pairs, dirs, eps=1e-4):
    for v in dirs:
        moved = Pose(rotation_exp(eps * v[:3]), eps * v[3:])
        for prev, curr in pairs:
            r = plane_residual(moved, prev, curr)
            assert np.linalg.norm(r) < 10 * eps * eps  # second order only


def test_single_plane_underconstrained_with_flat_directions():
    f = plane((0.0, 0.0, -1.0), 2.0)
    with pytest.raises(UnderConstrainedError) as exc:
        estimate_pose([(f, f)], [])
    dirs = exc.value.null_directions
    assert dirs.shape == (3, 6)
    null_directions_leave_residuals_flat([(f, f)], dirs)


def test_parallel_planes_still_underconstrained():
    a = plane((0.0, 0.0, -1.0), 2.0)
    b = plane((0.0, 0.0, -1.0), 3.0)
    with pytest.raises(UnderConstrainedError) as exc:
        estimate_pose([(a, a), (b, b)], [])
    dirs = exc.value.null_directions
    assert dirs.shape == (3, 6)
    null_directions_leave_residuals_flat([(a, a), (b, b)], dirs)


def test_two_orthogonal_planes_one_free_direction():
    a = plane((0.0, 0.0, -1.0), 3.0)
    b = plane((-1.0, 0.0, 0.0), 0.8)
    with pytest.raises(UnderConstrainedError) as exc:
        estimate_pose([(a, a), (b, b)], [])
    dirs = exc.value.null_directions
    assert dirs.shape == (1, 6)
    # The free motion is translation along n1 x n2 = y.
    v = dirs[0]
    assert np.abs(v[:3]).max() < 1e-8
    assert abs(abs(v[4]) - 1.0) < 1e-8


def test_single_cylinder_underconstrained():
    c = cylinder((-0.5, 0.0, 2.0), (0.5, 0.0, 2.0), 0.3)
    with pytest.raises(UnderConstrainedError) as exc:
        estimate_pose([], [(c, c)])
    # Free: translation along the axis and rotation about the axis.
    assert exc.value.null_directions.shape == (2, 6)


def test_common_weight_scaling_leaves_pose_unchanged():
    rng = np.random.default_rng(20)
    rot, t = random_pose(rng)
    # The x-axis cylinder pins translation y, which neither plane sees.
    plane_pairs, cyl_pairs = frame_pair(
        rng, rot, t,
        normals_ds=[((0.0, 0.0, -1.0), 3.0), ((-1.0, 0.0, 0.0), 0.8)],
        cylinders=[((1.0, 0.0, 0.0), (0.5, 0.0, 2.4), 0.2, 0.5)],
    )
    r1 = estimate_pose(plane_pairs, cyl_pairs, PoseConfig(alpha_plane=0.01, alpha_cylinder=0.1))
    r2 = estimate_pose(plane_pairs, cyl_pairs, PoseConfig(alpha_plane=0.07, alpha_cylinder=0.7))
    np.testing.assert_allclose(r1.pose.translation, r2.pose.translation, atol=1e-10)
    np.testing.assert_allclose(r1.pose.rotation, r2.pose.rotation, atol=1e-10)


def test_diagnostics_costs_non_increasing_per_iteration():
    rng = np.random.default_rng(21)
    rot, t = random_pose(rng)
    plane_pairs, _ = frame_pair(
        rng, rot, t,
        normals_ds=[((0.0, 0.0, -1.0), 3.0), ((-1.0, 0.0, 0.0), 0.8), ((0.0, -1.0, 0.0), 0.6)],
    )
    result = estimate_pose(plane_pairs, [])
    assert result.diagnostics
    for before, after, _ in result.diagnostics:
        assert after <= before + 1e-300


# ---------------------------------------------------------------------------
# Rotation plumbing


def test_rotation_exp_orthonormal():
    rng = np.random.default_rng(22)
    for _ in range(50):
        r = rotation_exp(rng.uniform(-2, 2, size=3))
        np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-12)


def test_rotation_exp_small_angle_branch():
    w = np.array([1e-12, -2e-12, 1e-12])
    r = rotation_exp(w)
    np.testing.assert_allclose(r, np.eye(3) + np.array([
        [0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0],
    ]), atol=1e-20)


def test_rotation_exp_angle_recovery():
    axis = np.array([0.3, -0.5, 0.8])
    axis /= np.linalg.norm(axis)
    for deg in (0.5, 10.0, 90.0, 179.0):
        r = rotation_exp(np.radians(deg) * axis)
        assert rotation_angle_deg(r) == pytest.approx(deg, abs=1e-9)


def test_quaternion_round_trip_random():
    rng = np.random.default_rng(23)
    for _ in range(100):
        r = rotation_exp(rng.uniform(-3, 3, size=3))
        q = quaternion_from_matrix(r)
        assert q[3] >= 0.0
        assert np.linalg.norm(q) == pytest.approx(1.0, abs=1e-12)
        np.testing.assert_allclose(matrix_from_quaternion(q), r, atol=1e-12)


@pytest.mark.parametrize("axis", [(1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0)])
def test_quaternion_branches_at_pi(axis):
    # trace = -1 exercises the non-principal Shepperd branches.
    r = rotation_about(axis, np.pi)
    q = quaternion_from_matrix(r)
    assert q[3] == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(matrix_from_quaternion(q), r, atol=1e-12)


def test_pose_apply_matches_matrix_form():
    rng = np.random.default_rng(24)
    rot, t = random_pose(rng)
    pose = Pose(rot, t)
    pts = rng.standard_normal((7, 3))
    np.testing.assert_allclose(pose.apply(pts), pts @ rot.T + t, atol=1e-15)
    q = pose.quaternion()
    np.testing.assert_allclose(matrix_from_quaternion(q), rot, atol=1e-12)
