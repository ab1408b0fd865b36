"""Spherical histogram of cell normals for seed selection.

Normals are camera-facing, so they concentrate around the -Z pole; the
polar angle is therefore measured from (0, 0, -1). Bins near that pole
collapse azimuth to a single bin to avoid the coordinate singularity.
"""

from __future__ import annotations

import numpy as np

from .errors import InputError

_UNIT_TOL = 1e-6


class NormalHistogram:
    """2D polar/azimuth quantization with per-cell membership tracking."""

    def __init__(self, polar_bins: int = 20, azimuth_bins: int = 20):
        if polar_bins < 1 or azimuth_bins < 1:
            raise InputError(f"bin counts must be positive, got {polar_bins}x{azimuth_bins}")
        self.polar_bins = polar_bins
        self.azimuth_bins = azimuth_bins
        self._bin_of: dict[int, int] = {}
        self._counts = np.zeros(polar_bins * azimuth_bins, dtype=np.int64)

    @property
    def n_bins(self) -> int:
        return self.polar_bins * self.azimuth_bins

    def counts(self) -> np.ndarray:
        return self._counts.copy()

    def bin_of(self, cell_id: int) -> int:
        return self._bin_of[cell_id]

    @classmethod
    def build(
        cls,
        normals: np.ndarray,
        cell_ids: np.ndarray | list[int],
        polar_bins: int = 20,
        azimuth_bins: int = 20,
    ) -> "NormalHistogram":
        """Quantize unit normals into bins and track which cell sits where.

        Args:
            normals: (n, 3) unit vectors; non-unit rows are an input error.
            cell_ids: n unique integer ids keying later removals.
        """
        h = cls(polar_bins, azimuth_bins)
        normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
        cell_ids = [int(i) for i in cell_ids]
        if len(cell_ids) != normals.shape[0]:
            raise InputError(f"{normals.shape[0]} normals vs {len(cell_ids)} cell ids")
        if len(set(cell_ids)) != len(cell_ids):
            raise InputError("cell ids must be unique")
        if normals.shape[0] == 0:
            return h
        norms = np.linalg.norm(normals, axis=1)
        if np.any(np.abs(norms - 1.0) > _UNIT_TOL):
            raise InputError("histogram input normals must be unit length")
        bins = h._quantize(normals)
        for cid, b in zip(cell_ids, bins):
            h._bin_of[cid] = int(b)
        np.add.at(h._counts, bins, 1)
        return h

    def _quantize(self, normals: np.ndarray) -> np.ndarray:
        # Polar angle from the camera-facing pole (0, 0, -1).
        polar = np.arccos(np.clip(-normals[:, 2], -1.0, 1.0))
        azimuth = np.mod(np.arctan2(normals[:, 1], normals[:, 0]), 2.0 * np.pi)
        polar_step = np.pi / self.polar_bins
        p_idx = np.minimum((polar / polar_step).astype(np.int64), self.polar_bins - 1)
        a_idx = np.minimum((azimuth / (2.0 * np.pi / self.azimuth_bins)).astype(np.int64), self.azimuth_bins - 1)
        # Within one polar step of the pole the azimuth is meaningless:
        # collapse to the bin azimuth 0 would land in.
        a_idx = np.where(polar < polar_step, 0, a_idx)
        return p_idx * self.azimuth_bins + a_idx

    def most_frequent_bin(self) -> list[int]:
        """Cell ids of the fullest bin, ascending; ties pick the lowest bin."""
        b = int(np.argmax(self._counts))
        if self._counts[b] == 0:
            return []
        return sorted(cid for cid, cb in self._bin_of.items() if cb == b)

    def remove_cells(self, cell_ids) -> None:
        """Stop tracking cells (e.g. after they join a segment).

        Removing an id that is not tracked is a contract violation.
        """
        for cid in cell_ids:
            cid = int(cid)
            try:
                b = self._bin_of.pop(cid)
            except KeyError:
                raise InputError(f"cell {cid} is not tracked by the histogram") from None
            self._counts[b] -= 1

    def total(self) -> int:
        return int(self._counts.sum())
