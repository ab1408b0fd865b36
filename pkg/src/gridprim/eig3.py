"""Closed-form eigen decomposition of symmetric 3x3 matrices.

Batched analytic solver (trigonometric form of the characteristic cubic)
so that per-cell plane fits avoid general-purpose iterative LAPACK calls.
Accuracy is bounded by eps * ||A||, which is ample for covariance matrices
whose smallest eigenvalue is separated from the middle one; the only
consumers that need the eigenvector are plane/axis fits, where that
separation holds by construction.
"""

from __future__ import annotations

import numpy as np


def symmetric_eig3(mats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (ascending) and the unit eigenvector of the smallest.

    Args:
        mats: (..., 3, 3) symmetric matrices.

    Returns:
        (w, v0): eigenvalues (..., 3) sorted ascending, and the eigenvector
        (..., 3) belonging to w[..., 0]. The eigenvector sign is arbitrary.
    """
    a = np.asarray(mats, dtype=np.float64)
    if a.shape[-2:] != (3, 3):
        raise ValueError(f"expected (..., 3, 3) matrices, got shape {a.shape}")

    q = np.trace(a, axis1=-2, axis2=-1) / 3.0
    b = a - q[..., None, None] * np.eye(3)
    p2 = np.einsum("...ij,...ij->...", b, b) / 6.0
    p = np.sqrt(np.maximum(p2, 0.0))

    # cos(3 phi) = det(B / p) / 2, clamped against rounding overshoot.
    safe_p = np.where(p > 0.0, p, 1.0)
    c = b / safe_p[..., None, None]
    half_det = 0.5 * np.linalg.det(c)
    half_det = np.clip(half_det, -1.0, 1.0)
    phi = np.arccos(half_det) / 3.0

    w_max = q + 2.0 * p * np.cos(phi)
    w_min = q + 2.0 * p * np.cos(phi + 2.0 * np.pi / 3.0)
    w_mid = 3.0 * q - w_max - w_min
    w = np.stack([w_min, w_mid, w_max], axis=-1)

    # Eigenvector of w_min from the largest cross product of rows of
    # (A - w_min I); rows of a rank-2 symmetric matrix span the orthogonal
    # complement of the eigenvector.
    m = a - w_min[..., None, None] * np.eye(3)
    r0, r1, r2 = m[..., 0, :], m[..., 1, :], m[..., 2, :]
    cands = np.stack([np.cross(r0, r1), np.cross(r0, r2), np.cross(r1, r2)], axis=-2)
    norms = np.linalg.norm(cands, axis=-1)
    best = np.argmax(norms, axis=-1)
    v = np.take_along_axis(cands, best[..., None, None], axis=-2)[..., 0, :]
    vnorm = np.take_along_axis(norms, best[..., None], axis=-1)[..., 0]

    # Isotropic (or near-isotropic) matrices leave every direction equally
    # valid; fall back to a fixed canonical vector.
    degenerate = vnorm <= 0.0
    v = np.where(degenerate[..., None], np.array([0.0, 0.0, 1.0]), v / np.where(degenerate, 1.0, vnorm)[..., None])
    return w, v
