"""Dense fields on regular voxel grids, multilinear sampling, and warping.

Conventions used throughout the package:

* coordinates are voxel indices (axis 0 first, row-major), world spacing only
  enters metric computations, never interpolation;
* a displacement field stores voxel-unit offsets with shape (*grid.shape, dim),
  channel c holding the offset along axis c;
* warping is a pull-back: out(x) = in(x + phi(x)).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ArgumentError, DomainError, ShapeError


class BorderPolicy(Enum):
    CLAMP = "clamp"
    ZERO = "zero"


@dataclass(frozen=True)
class Grid:
    """Regular sampling lattice. ``spacing`` is voxel size per axis."""

    shape: tuple
    spacing: tuple = None

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        if len(shape) not in (2, 3):
            raise ShapeError(f"grid must be 2D or 3D, got {len(shape)} axes")
        if any(s < 2 for s in shape):
            raise ShapeError(f"every grid axis needs at least 2 samples, got {shape}")
        spacing = self.spacing
        if spacing is None:
            spacing = (1.0,) * len(shape)
        spacing = tuple(float(h) for h in spacing)
        if len(spacing) != len(shape):
            raise ShapeError("spacing must have one entry per axis")
        if any(not np.isfinite(h) or h <= 0 for h in spacing):
            raise DomainError(f"spacings must be positive and finite, got {spacing}")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dim(self):
        return len(self.shape)

    @property
    def num_voxels(self):
        return int(np.prod(self.shape))


def _frozen(arr):
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class ScalarField:
    grid: Grid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != self.grid.shape:
            raise ShapeError(f"values shape {v.shape} != grid shape {self.grid.shape}")
        object.__setattr__(self, "values", _frozen(v))


@dataclass(frozen=True)
class DisplacementField:
    grid: Grid
    vectors: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        want = self.grid.shape + (self.grid.dim,)
        if v.shape != want:
            raise ShapeError(f"vectors shape {v.shape} != {want}")
        object.__setattr__(self, "vectors", _frozen(v))


@dataclass(frozen=True)
class LabelField:
    grid: Grid
    labels: np.ndarray = field(repr=False)

    def __post_init__(self):
        l = np.asarray(self.labels)
        if l.shape != self.grid.shape:
            raise ShapeError(f"labels shape {l.shape} != grid shape {self.grid.shape}")
        if l.dtype != np.uint8:
            if np.issubdtype(l.dtype, np.floating) and not np.array_equal(l, np.rint(l)):
                raise DomainError("labels must be integral")
            if l.min(initial=0) < 0 or l.max(initial=0) > 255:
                raise DomainError("labels must fit in uint8")
            l = l.astype(np.uint8)
        object.__setattr__(self, "labels", _frozen(l))


def identity_coords(grid):
    """Voxel-center coordinates, shape (*grid.shape, dim)."""
    return np.stack(np.meshgrid(*[np.arange(s, dtype=np.float64) for s in grid.shape],
                                indexing="ij"), axis=-1)


def _sample_values(values, pts, policy):
    """Multilinear sampling of channelled voxel data.

    values: (*spatial, C) array, pts: (n, dim) voxel coordinates.
    Returns (n, C). Exact-lattice points reproduce stored values bitwise.
    """
    pts = np.asarray(pts, dtype=np.float64)
    if not np.isfinite(pts).all():
        raise DomainError("sample points must be finite")
    spatial = values.shape[:-1]
    dim = len(spatial)
    if pts.ndim != 2 or pts.shape[1] != dim:
        raise ShapeError(f"points must be (n, {dim}), got {pts.shape}")

    lo = np.floor(pts).astype(np.int64)
    frac = pts - lo
    flat = values.reshape(-1, values.shape[-1])
    strides = np.array([int(np.prod(spatial[a + 1:])) for a in range(dim)], dtype=np.int64)

    out = np.zeros((pts.shape[0], values.shape[-1]), dtype=values.dtype)
    for corner in itertools.product((0, 1), repeat=dim):
        idx = lo + np.array(corner, dtype=np.int64)
        w = np.ones(pts.shape[0], dtype=np.float64)
        inside = np.ones(pts.shape[0], dtype=bool)
        clamped = np.empty_like(idx)
        for a in range(dim):
            w = w * (frac[:, a] if corner[a] else 1.0 - frac[:, a])
            inside &= (idx[:, a] >= 0) & (idx[:, a] < spatial[a])
            clamped[:, a] = np.clip(idx[:, a], 0, spatial[a] - 1)
        vals = flat[clamped @ strides]
        if policy is BorderPolicy.ZERO:
            vals = np.where(inside[:, None], vals, 0.0)
        out += w[:, None] * vals

    # lattice-exact points bypass the weighted sum so zero-displacement warps
    # return bit-identical data
    exact = (frac == 0.0).all(axis=1)
    if exact.any():
        idx = lo[exact]
        inside = np.ones(idx.shape[0], dtype=bool)
        clamped = np.empty_like(idx)
        for a in range(dim):
            inside &= (idx[:, a] >= 0) & (idx[:, a] < spatial[a])
            clamped[:, a] = np.clip(idx[:, a], 0, spatial[a] - 1)
        vals = flat[clamped @ strides]
        if policy is BorderPolicy.ZERO:
            vals = np.where(inside[:, None], vals, 0.0)
        out[exact] = vals
    return out


def sample_at(field, point, policy=BorderPolicy.CLAMP):
    """Multilinear sample of a ScalarField at one voxel-space point."""
    if not isinstance(policy, BorderPolicy):
        raise ArgumentError(f"unknown border policy {policy!r}")
    pt = np.asarray(point, dtype=np.float64).reshape(1, -1)
    if pt.shape[1] != field.grid.dim:
        raise ShapeError(f"point has {pt.shape[1]} coords, grid is {field.grid.dim}D")
    return float(_sample_values(field.values[..., None], pt, policy)[0, 0])


def warp_image(image, phi, policy=BorderPolicy.CLAMP):
    """Pull-back warp of a ScalarField: out(x) = image(x + phi(x))."""
    if image.grid != phi.grid:
        raise ShapeError("image and field live on different grids")
    if not isinstance(policy, BorderPolicy):
        raise ArgumentError(f"unknown border policy {policy!r}")
    pts = (identity_coords(image.grid) + phi.vectors).reshape(-1, image.grid.dim)
    out = _sample_values(image.values[..., None], pts, policy)
    return ScalarField(image.grid, out.reshape(image.grid.shape))


def warp_labels(labels, phi, policy=BorderPolicy.CLAMP):
    """Nearest-neighbour pull-back for label maps. ZERO maps outside to label 0."""
    if labels.grid != phi.grid:
        raise ShapeError("labels and field live on different grids")
    pts = identity_coords(labels.grid) + phi.vectors
    if not np.isfinite(pts).all():
        raise DomainError("warp coordinates must be finite")
    idx = np.rint(pts).astype(np.int64)
    shape = labels.grid.shape
    inside = np.ones(shape, dtype=bool)
    clamped = np.empty_like(idx)
    for a in range(labels.grid.dim):
        inside &= (idx[..., a] >= 0) & (idx[..., a] < shape[a])
        clamped[..., a] = np.clip(idx[..., a], 0, shape[a] - 1)
    out = labels.labels[tuple(np.moveaxis(clamped, -1, 0))]
    if policy is BorderPolicy.ZERO:
        out = np.where(inside, out, np.uint8(0))
    return LabelField(labels.grid, out)


def compose_fields(outer, inner, policy=BorderPolicy.CLAMP):
    """Field of the composite warp: warping by the result equals warping by
    ``outer`` after warping by ``inner``.

    result(x) = inner(x) + outer interpolated at x + inner(x).
    """
    if outer.grid != inner.grid:
        raise ShapeError("fields live on different grids")
    grid = outer.grid
    pts = (identity_coords(grid) + inner.vectors).reshape(-1, grid.dim)
    sampled = _sample_values(outer.vectors, pts, policy).reshape(inner.vectors.shape)
    return DisplacementField(grid, inner.vectors + sampled)


def mean_field(fields):
    """Voxelwise arithmetic mean of displacement fields on a shared grid."""
    fields = list(fields)
    if not fields:
        raise ArgumentError("mean_field needs at least one field")
    grid = fields[0].grid
    for f in fields[1:]:
        if f.grid != grid:
            raise ShapeError("fields live on different grids")
    acc = np.zeros_like(fields[0].vectors)
    for f in fields:
        acc += f.vectors
    return DisplacementField(grid, acc / len(fields))
