"""Differential and overlap metrics on fields.

Finite differences use central stencils in the interior and shifted one-sided
stencils at borders, scaled by the grid spacing. Displacements are stored in
voxel units; spacing converts them to world units where derivatives need it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, ShapeError
from .fields import DisplacementField, LabelField, ScalarField


def d1_matrix(n, h=1.0):
    """First-derivative matrix: central interior, one-sided at the two ends."""
    if n < 2:
        raise ShapeError("need at least 2 samples along an axis")
    m = np.zeros((n, n))
    for i in range(1, n - 1):
        m[i, i - 1] = -0.5
        m[i, i + 1] = 0.5
    m[0, 0], m[0, 1] = -1.0, 1.0
    m[-1, -2], m[-1, -1] = -1.0, 1.0
    return m / h


def d2_matrix(n, h=1.0):
    """Second-derivative matrix: [1, -2, 1] interior, shifted copy at the ends."""
    if n < 3:
        raise ShapeError("need at least 3 samples along an axis")
    m = np.zeros((n, n))
    for i in range(1, n - 1):
        m[i, i - 1], m[i, i], m[i, i + 1] = 1.0, -2.0, 1.0
    m[0, 0], m[0, 1], m[0, 2] = 1.0, -2.0, 1.0
    m[-1, -3], m[-1, -2], m[-1, -1] = 1.0, -2.0, 1.0
    return m / (h * h)


def apply_along(mat, arr, axis):
    """Apply a (n, n) matrix along one axis of an array."""
    moved = np.moveaxis(arr, axis, 0)
    out = (mat @ moved.reshape(moved.shape[0], -1)).reshape(moved.shape)
    return np.moveaxis(out, 0, axis)


def _interior(arr, dim):
    return arr[tuple(slice(1, -1) for _ in range(dim))]


def jacobian_det_field(phi: DisplacementField) -> ScalarField:
    """Determinant of I + du/dx at every voxel (world-unit derivatives)."""
    grid = phi.grid
    if any(s < 3 for s in grid.shape):
        raise ShapeError("jacobian needs at least 3 samples per axis")
    d = grid.dim
    u = phi.vectors
    # g[i][j] = d(u_i * h_i) / d(x_j * h_j)
    g = [[apply_along(d1_matrix(grid.shape[j], grid.spacing[j]), u[..., i], j)
          * grid.spacing[i] for j in range(d)] for i in range(d)]
    if d == 2:
        det = (1.0 + g[0][0]) * (1.0 + g[1][1]) - g[0][1] * g[1][0]
    else:
        a, b, c = 1.0 + g[0][0], g[0][1], g[0][2]
        e, f_, k = g[1][0], 1.0 + g[1][1], g[1][2]
        p, q, r = g[2][0], g[2][1], 1.0 + g[2][2]
        det = a * (f_ * r - k * q) - b * (e * r - k * p) + c * (e * q - f_ * p)
    return ScalarField(grid, det)


def folding_percent(phi: DisplacementField, interior_only=False) -> float:
    """Percentage of voxels where the Jacobian determinant is negative."""
    det = jacobian_det_field(phi).values
    if interior_only:
        det = _interior(det, phi.grid.dim)
    return 100.0 * float(np.count_nonzero(det < 0)) / det.size


def smoothness_metric(phi: DisplacementField, interior_only=False) -> float:
    """Mean Euclidean norm of the spatial gradient of the Jacobian determinant."""
    grid = phi.grid
    det = jacobian_det_field(phi).values
    g2 = np.zeros(grid.shape)
    for a in range(grid.dim):
        g2 += apply_along(d1_matrix(grid.shape[a], grid.spacing[a]), det, a) ** 2
    if interior_only:
        g2 = _interior(g2, grid.dim)
    return float(np.mean(np.sqrt(g2)))


def bending_energy(phi: DisplacementField, interior_only=False) -> float:
    """Mean squared second derivatives of the field.

    Per voxel the value sums, over displacement channels, every unmixed term
    (d2u/dxa2)^2 once and every mixed term (d2u/dxa dxb)^2 with weight 2.
    """
    grid = phi.grid
    if any(s < 3 for s in grid.shape):
        raise ShapeError("bending energy needs at least 3 samples per axis")
    d = grid.dim
    u = phi.vectors
    d1 = [d1_matrix(grid.shape[a], grid.spacing[a]) for a in range(d)]
    d2 = [d2_matrix(grid.shape[a], grid.spacing[a]) for a in range(d)]
    v = np.zeros(grid.shape)
    for c in range(d):
        uc = u[..., c] * grid.spacing[c]
        for a in range(d):
            v += apply_along(d2[a], uc, a) ** 2
            for b in range(a + 1, d):
                v += 2.0 * apply_along(d1[b], apply_along(d1[a], uc, a), b) ** 2
    if interior_only:
        v = _interior(v, d)
    return float(np.mean(v))


def displacement_norm(phi: DisplacementField) -> float:
    """Euclidean norm of the whole field, displacements in voxel units."""
    return float(np.sqrt(np.sum(phi.vectors ** 2)))


def dice_score(a: LabelField, b: LabelField, label: int) -> float:
    """Dice overlap of one label. Both-empty counts as perfect agreement."""
    if a.grid != b.grid:
        raise ShapeError("label fields live on different grids")
    ma = a.labels == label
    mb = b.labels == label
    denom = int(ma.sum()) + int(mb.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(ma & mb)) / denom


def box_sum(arr, window):
    """Sliding-window sum with zero padding, same shape as input."""
    out = np.asarray(arr, dtype=np.float64)
    for axis, w in enumerate(window):
        r = w // 2
        pad = [(0, 0)] * out.ndim
        pad[axis] = (r + 1, r)
        c = np.cumsum(np.pad(out, pad), axis=axis)
        n = out.shape[axis]
        out = np.take(c, np.arange(n) + w, axis=axis) - np.take(c, np.arange(n), axis=axis)
    return out


def _window_tuple(window, dim):
    if np.isscalar(window):
        window = (int(window),) * dim
    window = tuple(int(w) for w in window)
    if len(window) != dim:
        raise ShapeError("window needs one entry per axis")
    if any(w < 3 or w % 2 == 0 for w in window):
        raise ArgumentError(f"window sizes must be odd and >= 3, got {window}")
    return window


def window_counts(shape, window):
    """In-bounds sample count of each window position."""
    return box_sum(np.ones(shape), window)


# den floor keeps cc2 bounded when a window of b is flat; var floor (per
# in-bounds sample) marks windows of a as uninformative and excludes them
NCC_EPS = 1e-10
NCC_VAR_FLOOR = 1e-4


def ncc(a: ScalarField, b: ScalarField, window=9) -> float:
    """Mean squared local zero-normalized cross-correlation.

    Each window statistic uses the in-bounds samples only, which keeps the
    metric exactly invariant under affine intensity rescaling of one image.
    Windows where the first image is (nearly) constant carry no alignment
    signal, so they are excluded from the mean; ncc(a, a) of an image with
    informative windows is exactly 1. Returns 0.0 if no window qualifies.
    """
    if a.grid != b.grid:
        raise ShapeError("images live on different grids")
    window = _window_tuple(window, a.grid.dim)
    av, bv = a.values, b.values
    m = window_counts(av.shape, window)
    sa, sb = box_sum(av, window), box_sum(bv, window)
    saa, sbb, sab = box_sum(av * av, window), box_sum(bv * bv, window), box_sum(av * bv, window)
    cross = sab - sa * sb / m
    va = np.maximum(saa - sa * sa / m, 0.0)
    vb = np.maximum(sbb - sb * sb / m, 0.0)
    valid = va > NCC_VAR_FLOOR * m
    if not valid.any():
        return 0.0
    cc2 = cross * cross / np.maximum(va * vb, NCC_EPS)
    return float(np.mean(cc2[valid]))


@dataclass
class AtlasMetrics:
    """Registration-based evaluation summary of one atlas."""

    dice_mean: float
    dice_std: float
    folding_pct: float
    smoothness: float
    avg_disp: float
    per_subject: list = field(default_factory=list)

    def as_dict(self):
        return {
            "dice_mean": self.dice_mean,
            "dice_std": self.dice_std,
            "folding_pct": self.folding_pct,
            "smoothness": self.smoothness,
            "avg_disp": self.avg_disp,
            "per_subject": self.per_subject,
        }
