"""Seeded region growing over the cell grid.

Segments are grown breadth-first from the most promising seed of the most
populated normal-histogram bin. A 4-neighbor candidate joins when, tested
against the already-accepted cell expanding toward it, (i) it is still
unassigned and planar, (ii) the normals agree within the angular threshold,
and (iii) its centroid lies within a distance of the expander's plane that
scales with the expander's physical cell size. Accepted cells expand the
wavefront in turn, so growth follows smooth curvature (e.g. around a
cylinder) even though any single pair of distant cells would fail the test.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cells import CellGrid
from .errors import InputError
from .histogram import NormalHistogram


@dataclass(frozen=True)
class GrowConfig:
    normal_dot_min: float = float(np.cos(np.pi / 12.0))  # min dot between neighbor normals
    min_seed_bin: int = 5  # stop when the fullest bin has fewer cells (k1)
    min_segment_cells: int = 5  # discard smaller grown segments (k2)
    dist_cap: float = 0.1  # upper bound on the point-plane gate, meters


@dataclass
class CellSegment:
    """A 4-connected set of planar cells grown from one seed."""

    mask: np.ndarray  # (rows, cols) bool
    seed: tuple[int, int]

    def cell_count(self) -> int:
        return int(self.mask.sum())

    def member_ids(self, grid: CellGrid) -> np.ndarray:
        return np.flatnonzero(self.mask.ravel())


def plane_distance_threshold(grid: CellGrid, cfg: GrowConfig) -> np.ndarray:
    """Per-cell point-plane acceptance threshold.

    The threshold is the distance a neighboring coplanar cell's centroid
    could reach if the surface bent by exactly the normal-angle limit across
    one cell span: span * sqrt(1 - normal_dot_min^2), capped at dist_cap.
    Cells with unknown span fall back to the cap.
    """
    sin_limit = float(np.sqrt(max(0.0, 1.0 - cfg.normal_dot_min**2)))
    span = grid.corner_span
    thresh = np.where(np.isfinite(span), span * sin_limit, cfg.dist_cap)
    return np.minimum(thresh, cfg.dist_cap)


_SHIFTS = ((-1, 0), (1, 0), (0, -1), (0, 1))


def _shifted(arr: np.ndarray, dr: int, dc: int, fill) -> np.ndarray:
    """arr translated by (dr, dc), vacated border filled with ``fill``."""
    out = np.full_like(arr, fill)
    rows, cols = arr.shape[0], arr.shape[1]
    src_r = slice(max(0, -dr), min(rows, rows - dr))
    src_c = slice(max(0, -dc), min(cols, cols - dc))
    dst_r = slice(max(0, dr), min(rows, rows + dr))
    dst_c = slice(max(0, dc), min(cols, cols + dc))
    out[dst_r, dst_c] = arr[src_r, src_c]
    return out


def admissible_edges(
    grid: CellGrid, cfg: GrowConfig, dist_thresh: np.ndarray | None = None
) -> tuple[np.ndarray, ...]:
    """Directed pairwise acceptance, one bool grid per 4-neighbor direction.

    ``edges[k][r, c]`` says that cell (r, c), once accepted and acting as
    the expander, admits its neighbor in direction ``_SHIFTS[k]``. The test
    only involves static cell attributes, so it is computed once and reused
    across every wavefront iteration and every seed.
    """
    if dist_thresh is None:
        dist_thresh = plane_distance_threshold(grid, cfg)
    normal = grid.normal
    edges = []
    for dr, dc in _SHIFTS:
        # Candidate attributes aligned onto the expander's position.
        n_cand = np.empty_like(normal)
        c_cand = np.empty_like(normal)
        for k in range(3):
            n_cand[..., k] = _shifted(normal[..., k], -dr, -dc, 0.0)
            c_cand[..., k] = _shifted(grid.centroid[..., k], -dr, -dc, 0.0)
        p_cand = _shifted(grid.planar, -dr, -dc, False)
        dot = np.einsum("rci,rci->rc", normal, n_cand)
        dist = np.abs(np.einsum("rci,rci->rc", normal, c_cand) + grid.d)
        edges.append(p_cand & (dot > cfg.normal_dot_min) & (dist < dist_thresh))
    return tuple(edges)


def grow_seed(
    grid: CellGrid,
    remaining: np.ndarray,
    seed: tuple[int, int],
    cfg: GrowConfig,
    dist_thresh: np.ndarray | None = None,
    edges: tuple[np.ndarray, ...] | None = None,
) -> CellSegment:
    """Grow one segment from ``seed`` across cells flagged in ``remaining``.

    ``remaining`` is not modified. The seed must be a planar cell inside
    ``remaining``; anything else is a contract violation.
    """
    sr, sc = seed
    if not (0 <= sr < grid.rows and 0 <= sc < grid.cols):
        raise InputError(f"seed {seed} outside the {grid.rows}x{grid.cols} grid")
    if not grid.planar[sr, sc] or not remaining[sr, sc]:
        raise InputError(f"seed {seed} is not an available planar cell")
    if edges is None:
        edges = admissible_edges(grid, cfg, dist_thresh)

    eligible = remaining & grid.planar
    region = np.zeros_like(eligible)
    region[sr, sc] = True
    frontier = region.copy()

    while frontier.any():
        grown = np.zeros_like(frontier)
        for k, (dr, dc) in enumerate(_SHIFTS):
            grown |= _shifted(frontier & edges[k], dr, dc, False)
        accepted = grown & eligible & ~region
        region |= accepted
        frontier = accepted
    return CellSegment(mask=region, seed=(sr, sc))


def grow_all(grid: CellGrid, hist: NormalHistogram, cfg: GrowConfig) -> list[CellSegment]:
    """Extract segments until no histogram bin holds enough seed candidates.

    Each round picks the fullest bin, seeds from its lowest-MSE cell, grows,
    and retires the grown cells from both the histogram and the pool of
    remaining cells. Grown regions below the size threshold are dropped but
    still retired, so the loop always makes progress.
    """
    remaining = grid.planar.copy()
    edges = admissible_edges(grid, cfg)
    mse_flat = grid.mse.ravel()
    segments: list[CellSegment] = []

    while True:
        bin_cells = hist.most_frequent_bin()
        if len(bin_cells) < cfg.min_seed_bin:
            break
        # Seed: lowest fit MSE; the id order of most_frequent_bin breaks ties.
        seed_id = min(bin_cells, key=lambda cid: (mse_flat[cid], cid))
        segment = grow_seed(grid, remaining, grid.rc(seed_id), cfg, edges=edges)
        member_ids = segment.member_ids(grid)
        remaining[segment.mask] = False
        hist.remove_cells(member_ids.tolist())
        if segment.cell_count() >= cfg.min_segment_cells:
            segments.append(segment)
    return segments
