"""Pixel-level segment boundary refinement via cell-mask morphology.

Cell-resolution segmentation is blocky at primitive borders. Each
primitive's cell mask is eroded (4-neighbor) and dilated (8-neighbor);
pixels inside the eroded core are labeled outright, while pixels in the
band between dilation and erosion are assigned to the closest primitive
whose model passes a distance gate scaled by that primitive's fit MSE.
Primitives whose mask erodes away entirely are dropped before this runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import OrganizedCloud
from .cells import CellGrid
from .fitting import CylinderModel, PlaneModel

Primitive = PlaneModel | CylinderModel


@dataclass(frozen=True)
class RefineConfig:
    mse_factor: float = 9.0  # band pixels need distance^2 < mse_factor * MSE
    # Numerical floor on the squared-distance gate. Synthetic noise-free
    # surfaces fit with MSE at rounding level (or exactly 0), which would
    # otherwise reject their own boundary pixels.
    threshold_floor: float = 1e-18  # m^2

    def gate(self, mse: float) -> float:
        return max(self.mse_factor * mse, self.threshold_floor)


def erode4(mask: np.ndarray) -> np.ndarray:
    """3x3 cross erosion; cells outside the grid count as absent."""
    out = mask.copy()
    out[1:, :] &= mask[:-1, :]
    out[:-1, :] &= mask[1:, :]
    out[:, 1:] &= mask[:, :-1]
    out[:, :-1] &= mask[:, 1:]
    out[0, :] = False
    out[-1, :] = False
    out[:, 0] = False
    out[:, -1] = False
    # Border rows/cols lack a neighbor on one side, so they never survive;
    # the explicit clears above make that independent of mask content.
    return out & mask


def dilate8(mask: np.ndarray) -> np.ndarray:
    """3x3 box dilation clipped to the grid."""
    out = mask.copy()
    out[1:, :] |= mask[:-1, :]
    out[:-1, :] |= mask[1:, :]
    out[:, 1:] |= mask[:, :-1]
    out[:, :-1] |= mask[:, 1:]
    out[1:, 1:] |= mask[:-1, :-1]
    out[1:, :-1] |= mask[:-1, 1:]
    out[:-1, 1:] |= mask[1:, :-1]
    out[:-1, :-1] |= mask[1:, 1:]
    return out


def refine_labels(
    primitives: list[Primitive],
    grid: CellGrid,
    cloud: OrganizedCloud,
    cfg: RefineConfig,
) -> np.ndarray:
    """Produce the per-pixel label image for refined primitives.

    Labels are 1-based in the order of ``primitives``; 0 means unassigned.
    Every primitive must have a non-empty eroded mask (callers drop fully
    eroded ones first). Pixels of eroded cells take their primitive's label
    directly; valid pixels of refinement-band cells take the label of the
    nearest primitive among those whose distance gate they pass. Invalid
    pixels are never labeled.

    Returns:
        (H, W) int32 label image cropped semantics: pixels beyond the last
        full cell stay 0.
    """
    ps = grid.patch_size
    h, w = grid.rows * ps, grid.cols * ps
    labels = np.zeros((cloud.height, cloud.width), dtype=np.int32)
    if not primitives:
        return labels

    valid = cloud.valid[:h, :w]
    points = cloud.points[:h, :w]

    eroded_masks = [erode4(p.cell_mask) for p in primitives]
    eroded_any = np.zeros((grid.rows, grid.cols), dtype=bool)
    for em in eroded_masks:
        eroded_any |= em

    # Direct labels for eroded cores (disjoint across primitives), expanded
    # from one cell-level label grid in a single pass.
    core_cells = np.zeros((grid.rows, grid.cols), dtype=np.int32)
    for k, em in enumerate(eroded_masks, start=1):
        if not em.any():
            raise ValueError(f"primitive {k} has an empty eroded mask; drop it before refining")
        core_cells[em] = k
    core_px = np.repeat(np.repeat(core_cells, ps, axis=0), ps, axis=1)
    labels[:h, :w] = np.where(valid, core_px, 0)

    # Distance competition over the refinement bands; pixels are gathered
    # per band cell rather than through full-image masks.
    off = np.arange(ps)
    best_d2 = np.full((h, w), np.inf)
    for k, (prim, em) in enumerate(zip(primitives, eroded_masks), start=1):
        band = dilate8(prim.cell_mask) & ~em & ~eroded_any
        if not band.any():
            continue
        br, bc = np.nonzero(band)
        r_px = np.broadcast_to(
            br[:, None, None] * ps + off[None, :, None], (br.size, ps, ps)
        ).reshape(-1)
        c_px = np.broadcast_to(
            bc[:, None, None] * ps + off[None, None, :], (bc.size, ps, ps)
        ).reshape(-1)
        ok_px = valid[r_px, c_px]
        rows_px, cols_px = r_px[ok_px], c_px[ok_px]
        if rows_px.size == 0:
            continue
        d = prim.distance(points[rows_px, cols_px])
        d2 = d * d
        ok = d2 < cfg.gate(prim.mse)
        rr, cc = rows_px[ok], cols_px[ok]
        better = d2[ok] < best_d2[rr, cc]
        labels[rr[better], cc[better]] = k
        best_d2[rr[better], cc[better]] = d2[ok][better]
    return labels


def pixel_masks(labels: np.ndarray, n_primitives: int) -> list[np.ndarray]:
    return [labels == k for k in range(1, n_primitives + 1)]
