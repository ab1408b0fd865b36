import numpy as np
import pytest

from gridprim.errors import InputError
from gridprim.fitting import CylinderModel, PlaneModel
from gridprim.odometry import Pose, rotation_exp
from gridprim.records import (
    features_from_records,
    format_pose_line,
    format_records,
    format_timing_report,
    parse_pose_line,
    parse_records,
    read_label_png,
    read_records,
    write_label_png,
    write_pose,
    write_records,
)


def awkward_plane():
    n = np.array([1.0, 2.0, -3.0])
    n /= np.linalg.norm(n)
    mask = np.zeros((4, 5), dtype=bool)
    mask[1:3, 2:4] = True
    return PlaneModel(normal=n, d=np.pi, mse=1.23456789e-7, cell_mask=mask, n_pixels=1601)


def awkward_cylinder():
    mask = np.zeros((4, 5), dtype=bool)
    mask[0, :3] = True
    return CylinderModel(
        axis=np.array([1.0, 0.0, 0.0]),
        point_a=np.array([-1.0 / 3.0, 0.1234567891, 2.0]),
        point_b=np.array([2.0 / 3.0, 0.1234567891, 2.0]),
        radius=0.2999999991,
        mse=4.5e-9,
        cell_mask=mask,
        n_pixels=777,
        var_radius=6.789e-10,
    )


def test_round_trip_preserves_nine_significant_digits():
    text = format_records([awkward_plane()], [awkward_cylinder()])
    planes, cylinders = parse_records(text)
    assert len(planes) == 1 and len(cylinders) == 1
    p, c = planes[0], cylinders[0]
    src_p, src_c = awkward_plane(), awkward_cylinder()
    np.testing.assert_allclose(p.normal, src_p.normal, rtol=5e-9)
    assert p.d == pytest.approx(src_p.d, rel=5e-9)
    assert p.mse == pytest.approx(src_p.mse, rel=5e-9)
    assert (p.cells, p.pixels) == (4, 1601)
    np.testing.assert_allclose(c.point_a, src_c.point_a, rtol=5e-9)
    np.testing.assert_allclose(c.point_b, src_c.point_b, rtol=5e-9)
    assert c.radius == pytest.approx(src_c.radius, rel=5e-9)
    assert c.var_radius == pytest.approx(src_c.var_radius, rel=5e-9)
    assert (c.cells, c.pixels) == (3, 777)


def test_format_is_deterministic_bytes():
    a = format_records([awkward_plane()], [awkward_cylinder()])
    b = format_records([awkward_plane()], [awkward_cylinder()])
    assert a == b


def test_ids_are_sequential_planes_first():
    text = format_records([awkward_plane(), awkward_plane()], [awkward_cylinder()])
    planes, cylinders = parse_records(text)
    assert [p.id for p in planes] == [1, 2]
    assert [c.id for c in cylinders] == [3]


def test_comments_and_blank_lines_skipped():
    text = format_records([awkward_plane()], [])
    decorated = "# preamble\n\n" + text + "\n# trailer\n"
    planes, cylinders = parse_records(decorated)
    assert len(planes) == 1 and not cylinders


def test_inline_comment_stripped():
    text = format_records([awkward_plane()], []).splitlines()[1] + "  # fitted wall\n"
    planes, _ = parse_records(text)
    assert len(planes) == 1


@pytest.mark.parametrize(
    "line, lineno",
    [
        ("1 plane 0 0 -1 2 0 4", 1),  # 8 tokens
        ("# ok\n1 cylinder 0 0 2 1 0 2 0.3 0 0 4", 2),  # 12 tokens
        ("\n\n1 sphere 0 0 2 0.5 0 1 9", 3),  # unknown kind
        ("1 plane 0 0 -1 2.x 0 4 100", 1),  # bad float
        ("x plane 0 0 -1 2 0 4 100", 1),  # bad id
    ],
)
def test_malformed_lines_report_line_number(line, lineno):
    with pytest.raises(InputError, match=f"line {lineno}"):
        parse_records(line)


def test_file_round_trip(tmp_path):
    path = tmp_path / "records.txt"
    write_records(path, [awkward_plane()], [awkward_cylinder()])
    planes, cylinders = read_records(path)
    assert len(planes) == 1 and len(cylinders) == 1
    # A second write of the same result is byte-identical.
    first = path.read_bytes()
    write_records(path, [awkward_plane()], [awkward_cylinder()])
    assert path.read_bytes() == first


def test_features_from_records_carry_ids_and_sizes():
    text = format_records([awkward_plane()], [awkward_cylinder()])
    planes, cylinders = parse_records(text)
    labels = np.zeros((6, 6), dtype=np.int32)
    feats = features_from_records(planes, cylinders, labels)
    assert feats.planes[0].label == 1
    assert feats.planes[0].n_pixels == 1601
    assert feats.cylinders[0].label == 2
    assert feats.cylinders[0].var_radius == pytest.approx(6.789e-10, rel=5e-9)
    assert feats.cylinders[0].endpoint_cov is None
    assert feats.labels is labels


def test_label_png_round_trip(tmp_path):
    rng = np.random.default_rng(31)
    labels = rng.integers(0, 256, size=(33, 47)).astype(np.int32)
    path = tmp_path / "labels.png"
    write_label_png(path, labels)
    back = read_label_png(path)
    assert back.dtype == np.int32
    np.testing.assert_array_equal(back, labels)


def test_label_png_rejects_out_of_range(tmp_path):
    path = tmp_path / "labels.png"
    with pytest.raises(InputError):
        write_label_png(path, np.full((4, 4), 256, dtype=np.int32))
    with pytest.raises(InputError):
        write_label_png(path, np.full((4, 4), -1, dtype=np.int32))
    with pytest.raises(InputError):
        write_label_png(path, np.zeros((2, 2, 3), dtype=np.int32))


def test_timing_report_values_and_header():
    report = format_timing_report({"extract": [1e-3, 2e-3, 3e-3]})
    lines = report.splitlines()
    assert lines[0] == "# stage mean_us p50_us p95_us max_us"
    name, mean, p50, p95, mx = lines[1].split()
    assert name == "extract"
    assert float(mean) == pytest.approx(2000.0)
    assert float(p50) == pytest.approx(2000.0)
    assert float(p95) == pytest.approx(np.percentile([1000.0, 2000.0, 3000.0], 95))
    assert float(mx) == pytest.approx(3000.0)


def test_timing_report_preserves_stage_order():
    report = format_timing_report({"b": [1.0], "a": [1.0]})
    names = [line.split()[0] for line in report.splitlines()[1:]]
    assert names == ["b", "a"]


def test_timing_report_rejects_empty_stage():
    with pytest.raises(InputError, match="no samples"):
        format_timing_report({"extract": []})


def test_pose_line_round_trip():
    rng = np.random.default_rng(32)
    for _ in range(20):
        pose = Pose(rotation_exp(rng.uniform(-2, 2, 3)), rng.uniform(-1, 1, 3))
        line = format_pose_line(pose)
        assert len(line.split()) == 7
        assert float(line.split()[6]) >= 0.0  # canonical qw sign
        back = parse_pose_line(line)
        np.testing.assert_allclose(back.translation, pose.translation, atol=1e-8)
        np.testing.assert_allclose(back.rotation, pose.rotation, atol=1e-7)


def test_pose_file_round_trip(tmp_path):
    pose = Pose(rotation_exp(np.array([0.1, -0.2, 0.3])), np.array([0.5, 0.0, -0.25]))
    path = tmp_path / "pose.txt"
    write_pose(path, pose)
    back = parse_pose_line(path.read_text())
    np.testing.assert_allclose(back.rotation, pose.rotation, atol=1e-7)


def test_pose_line_wrong_field_count():
    with pytest.raises(InputError, match="7 fields"):
        parse_pose_line("0 0 0 0 0 0")
