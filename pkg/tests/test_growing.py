import numpy as np
import pytest

from gridprim.camera import backproject
from gridprim.cells import CellGridConfig, build_grid
from gridprim.errors import InputError
from gridprim.growing import (
    GrowConfig,
    admissible_edges,
    grow_all,
    grow_seed,
    plane_distance_threshold,
)
from gridprim.histogram import NormalHistogram
from gridprim.synthetic import ScenePlane

from helpers import VGA, pipe, render_cloud, wall_cloud


def hist_of(grid):
    ids = grid.planar_ids()
    normals = grid.normal.reshape(-1, 3)[ids]
    return NormalHistogram.build(normals, ids)


def flood_fill_oracle(grid, admissible, seed):
    """Brute-force BFS over 4-neighbors using a pairwise admissibility callback."""
    rows, cols = grid.rows, grid.cols
    seen = {seed}
    queue = [seed]
    while queue:
        cur = queue.pop()
        r, c = divmod(cur, cols)
        for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            rr, cc = r + dr, c + dc
            if not (0 <= rr < rows and 0 <= cc < cols):
                continue
            nxt = rr * cols + cc
            if nxt in seen or not admissible(cur, nxt):
                continue
            seen.add(nxt)
            queue.append(nxt)
    return seen


def test_single_wall_one_segment_covers_all():
    cloud = wall_cloud(offset=2.0)
    grid = build_grid(cloud, CellGridConfig(patch_size=20))
    segments = grow_all(grid, hist_of(grid), GrowConfig())
    assert len(segments) == 1
    assert segments[0].cell_count() == grid.rows * grid.cols


def test_two_walls_one_segment_each():
    # The fold cells along the junction tilt between both walls and may
    # form a thin segment of their own; each wall itself must come out as
    # exactly one internally consistent segment.
    cloud = render_cloud([
        ScenePlane(normal=(0.0, 0.0, -1.0), offset=3.0),
        ScenePlane(normal=(-1.0, 0.0, 0.0), offset=0.8),
    ])
    grid = build_grid(cloud, CellGridConfig(patch_size=20))
    segments = grow_all(grid, hist_of(grid), GrowConfig())
    covered = 0
    for wall_n in (np.array([0.0, 0.0, -1.0]), np.array([-1.0, 0.0, 0.0])):
        aligned = []
        for seg in segments:
            ids = seg.member_ids(grid)
            normals = grid.normal.reshape(-1, 3)[ids]
            if normals.mean(axis=0) @ wall_n > np.cos(np.radians(1.0)):
                aligned.append(seg)
                assert (normals @ normals[0] > np.cos(np.radians(16.0))).all()
        assert len(aligned) == 1
        covered += aligned[0].cell_count()
    assert covered >= 0.9 * int(grid.planar.sum())


def test_segments_disjoint_and_planar():
    cloud = render_cloud([
        ScenePlane(normal=(0.0, 0.0, -1.0), offset=3.0),
        ScenePlane(normal=(-1.0, 0.0, 0.0), offset=0.8),
        pipe(0.4, (0.0, 0.5, 2.0)),
    ])
    grid = build_grid(cloud, CellGridConfig(patch_size=20))
    segments = grow_all(grid, hist_of(grid), GrowConfig())
    planar = grid.planar.ravel()
    seen = np.zeros(grid.rows * grid.cols, dtype=bool)
    for seg in segments:
        ids = seg.member_ids(grid)
        assert planar[ids].all()
        assert not seen[ids].any()
        seen[ids] = True


def test_cylinder_grows_into_single_segment():
    # Adjacent cell normals on a 0.5 m pipe at 2 m differ by ~8 degrees,
    # inside the 15 degree gate, so growing sweeps the whole arc.
    cloud = render_cloud([pipe(0.5, (0.0, 0.0, 2.0))])
    grid = build_grid(cloud, CellGridConfig(patch_size=20))
    segments = grow_all(grid, hist_of(grid), GrowConfig())
    on_pipe = [s for s in segments if s.cell_count() >= 10]
    assert len(on_pipe) == 1
    n_planar = int(grid.planar.sum())
    assert on_pipe[0].cell_count() > 0.7 * n_planar


def test_wavefront_matches_flood_fill_oracle():
    cloud = render_cloud([
        ScenePlane(normal=(0.0, 0.0, -1.0), offset=3.0),
        pipe(0.5, (0.0, 0.3, 2.0)),
    ])
    grid = build_grid(cloud, CellGridConfig(patch_size=20))
    cfg = GrowConfig()
    edges = admissible_edges(grid, cfg)
    remaining = grid.planar.copy()
    hist = hist_of(grid)
    seed_ids = hist.most_frequent_bin()
    mses = grid.mse.ravel()
    seed = min(seed_ids, key=lambda cid: (mses[cid], cid))
    seg = grow_seed(grid, remaining, grid.rc(seed), cfg)

    normals = grid.normal.reshape(-1, 3)
    planar = grid.planar.ravel()
    thresh = plane_distance_threshold(grid, cfg)
    d = grid.d.ravel()

    def admissible(src, dst):
        if not (planar[src] and planar[dst]):
            return False
        if normals[src] @ normals[dst] < cfg.normal_dot_min:
            return False
        centroid = grid.centroid.reshape(-1, 3)[dst]
        return abs(normals[src] @ centroid + d[src]) <= thresh.ravel()[src]

    oracle = flood_fill_oracle(grid, admissible, seed)
    got = set(np.flatnonzero(seg.mask.ravel()).tolist())
    assert got == oracle


def test_small_bin_stops_growing():
    # Once every remaining bin holds fewer than min_seed_bin cells the
    # sweep stops and those cells stay unsegmented.
    cloud = wall_cloud(offset=2.0, width=120, height=120)
    grid = build_grid(cloud, CellGridConfig(patch_size=20))
    assert grid.rows * grid.cols == 36
    cfg = GrowConfig(min_seed_bin=40)
    segments = grow_all(grid, hist_of(grid), cfg)
    assert segments == []


def test_small_segment_dropped_but_retired():
    # A 2x2 island (4 cells) seeds a bin of size 4 < k2 = 5: the segment is
    # discarded yet its cells leave the histogram, so grow_all terminates.
    depth = np.zeros((120, 120))
    depth[40:80, 40:80] = 2.0
    cloud = backproject(depth, VGA)
    grid = build_grid(cloud, CellGridConfig(patch_size=20))
    assert int(grid.planar.sum()) == 4
    hist = hist_of(grid)
    cfg = GrowConfig(min_seed_bin=1, min_segment_cells=5)
    segments = grow_all(grid, hist, cfg)
    assert segments == []
    assert hist.total() == 0


def test_distance_threshold_grows_with_depth_then_caps():
    near = wall_cloud(offset=1.0, width=200, height=200)
    far = wall_cloud(offset=10.0, width=200, height=200)
    cfg = GrowConfig()
    t_near = plane_distance_threshold(build_grid(near, CellGridConfig(patch_size=20)), cfg)
    t_far = plane_distance_threshold(build_grid(far, CellGridConfig(patch_size=20)), cfg)
    assert np.nanmean(t_near) < np.nanmean(t_far) <= cfg.dist_cap + 1e-12
    # At 10 m the uncapped span-based value (~0.12) exceeds the cap.
    assert np.nanmax(t_far) == pytest.approx(cfg.dist_cap, abs=1e-12)
    # Oracle for the uncapped branch: span * sqrt(1 - T_N^2) at 1 m.
    grid1 = build_grid(near, CellGridConfig(patch_size=20))
    expect = grid1.corner_span * np.sqrt(1.0 - cfg.normal_dot_min**2)
    np.testing.assert_allclose(t_near, expect, rtol=1e-12)


def test_step_between_coplanar_strips_blocks_growth():
    # Two fronto-parallel strips 0.5 m apart share a normal but fail the
    # point-to-plane distance gate, so they become separate segments.
    depth = np.full((200, 200), 2.0)
    depth[:, 100:] = 2.5
    cloud = backproject(depth, VGA)
    grid = build_grid(cloud, CellGridConfig(patch_size=20))
    segments = grow_all(grid, hist_of(grid), GrowConfig())
    sizes = sorted(s.cell_count() for s in segments)
    assert sizes == [50, 50]


def test_grow_seed_bad_seed_rejected():
    cloud = wall_cloud(offset=2.0, width=100, height=100)
    grid = build_grid(cloud, CellGridConfig(patch_size=20))
    remaining = grid.planar.copy()
    with pytest.raises(InputError):
        grow_seed(grid, remaining, (99, 0), GrowConfig())
    remaining[0, 3] = False
    with pytest.raises(InputError):
        grow_seed(grid, remaining, (0, 3), GrowConfig())
