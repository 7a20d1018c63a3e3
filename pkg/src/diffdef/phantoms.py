"""Synthetic 2D head phantoms with analytically controlled ventricle size.

Each phantom is an outer soft-edged ellipse (the "brain", ~0.8) with a
concentric inner ellipse (the "ventricle", ~0.2) whose area is c times the
outer area. A fixed plane-wave texture rides on the brain so that windowed
correlation has signal away from edges; it lives in template coordinates and
deforms with the subject, so matching it recovers the warp. Labels come from
4x supersampled coverage masks warped alongside the intensities, so the
measured area fraction tracks c to rasterization accuracy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from . import analysis
from .atlas import VENTRICLE_LABEL, Cohort, Subject
from .errors import ArgumentError, NumericError
from .fields import DisplacementField, Grid, LabelField, ScalarField, warp_image

PHANTOM_SEED_STREAM = 0x9A27
GENERATOR_VERSION = "diffdef-phantoms-1"
MARGIN = 4.0
SUPERSAMPLE = 4
BRAIN_LEVEL = 0.8
VENTRICLE_DROP = 0.6
DEFORM_SMOOTH_SIGMA = 8.0
MAX_DEFORM_RETRIES = 20


@dataclass
class PhantomSpec:
    grid: Grid = None
    condition: float = 0.3
    seed: int = 0
    radii_range: tuple = (20.0, 26.0)
    warp_amplitude: float = 2.5
    noise_sigma: float = 0.01
    center_offset: tuple = (0.0, 0.0)
    edge_width: float = 1.5

    def __post_init__(self):
        if self.grid is None:
            self.grid = Grid((64, 64))
        if self.grid.dim != 2:
            raise ArgumentError("phantoms are 2D")
        lo, hi = self.radii_range
        if not (0 < lo <= hi):
            raise ArgumentError(f"bad radii range {self.radii_range}")
        if not (0.0 <= self.condition <= 1.0):
            raise ArgumentError(f"condition must be in [0, 1], got {self.condition}")
        if self.warp_amplitude < 0 or self.noise_sigma < 0:
            raise ArgumentError("amplitude and noise sigma must be >= 0")
        if self.edge_width <= 0:
            raise ArgumentError("edge width must be positive")
        reach = hi + max(abs(self.center_offset[0]), abs(self.center_offset[1]))
        if reach > min(self.grid.shape) / 2.0 - MARGIN:
            raise ArgumentError(
                f"radii {self.radii_range} + offset {self.center_offset} leave "
                f"less than a {MARGIN:g}-voxel margin on grid {self.grid.shape}")


def _centered_coords(shape, offset, oversample=1):
    n0, n1 = shape[0] * oversample, shape[1] * oversample
    y = (np.arange(n0) + 0.5) / oversample - 0.5 - (shape[0] - 1) / 2.0 - offset[0]
    x = (np.arange(n1) + 0.5) / oversample - 0.5 - (shape[1] - 1) / 2.0 - offset[1]
    return np.meshgrid(y, x, indexing="ij")


def _texture(y, x):
    # fixed incommensurate plane waves; wavelengths chosen >> voxel, << radius
    u1 = 0.52 * y + 0.85 * x
    u2 = 0.91 * y - 0.41 * x
    return 0.05 * np.sin(2 * np.pi * u1 / 17.0) + 0.05 * np.cos(2 * np.pi * u2 / 23.0)


def _soft_mask(y, x, a, b, edge_width):
    if a <= 0 or b <= 0:
        return np.zeros_like(y)
    r = np.sqrt((y / a) ** 2 + (x / b) ** 2)
    k = min(a, b) / edge_width
    return 1.0 / (1.0 + np.exp(np.clip((r - 1.0) * k, -60.0, 60.0)))


def _coverage(shape, offset, a, b):
    if a <= 0 or b <= 0:
        return np.zeros(shape)
    y, x = _centered_coords(shape, offset, oversample=SUPERSAMPLE)
    inside = ((y / a) ** 2 + (x / b) ** 2 <= 1.0).astype(np.float64)
    s = SUPERSAMPLE
    return inside.reshape(shape[0], s, shape[1], s).mean(axis=(1, 3))


def _smooth_deformation(grid, amplitude, seed_key):
    """Random smooth field with max voxel displacement = amplitude, retried
    until folding-free."""
    for attempt in range(MAX_DEFORM_RETRIES):
        rng = np.random.default_rng(list(seed_key) + [attempt])
        u = np.stack([gaussian_filter(rng.standard_normal(grid.shape),
                                      DEFORM_SMOOTH_SIGMA) for _ in range(2)], axis=-1)
        peak = np.sqrt((u ** 2).sum(axis=-1)).max()
        if peak < 1e-12:
            continue
        u *= amplitude / peak
        phi = DisplacementField(grid, u)
        if analysis.folding_percent(phi) == 0.0:
            return phi
    raise NumericError(f"no folding-free deformation found in {MAX_DEFORM_RETRIES} tries")


def ventricle_fraction(labels) -> float:
    """Ventricle area as a fraction of total head area, from a label map.

    Accepts a LabelField or a plain integer array. This is the quantity the
    condition variable encodes; measuring a generated atlas means warping the
    reference labels by its deformation and passing them here.
    """
    lab = labels.labels if isinstance(labels, LabelField) else np.asarray(labels)
    n_head = int((lab >= 1).sum())
    if n_head == 0:
        return 0.0
    return float((lab == VENTRICLE_LABEL).sum()) / n_head


def make_phantom(spec: PhantomSpec) -> Subject:
    """Render, deform, and label one phantom. The returned condition is the
    measured post-deformation ventricle fraction, not the requested one."""
    grid = spec.grid
    rng = np.random.default_rng([PHANTOM_SEED_STREAM, spec.seed])
    lo, hi = spec.radii_range
    a_out = float(rng.uniform(lo, hi))
    b_out = float(rng.uniform(lo, hi))
    s = np.sqrt(spec.condition)
    a_in, b_in = s * a_out, s * b_out

    y, x = _centered_coords(grid.shape, spec.center_offset)
    m_out = _soft_mask(y, x, a_out, b_out, spec.edge_width)
    m_in = _soft_mask(y, x, a_in, b_in, spec.edge_width)
    intensity = m_out * (BRAIN_LEVEL + _texture(y, x)) - VENTRICLE_DROP * m_in
    cov_out = _coverage(grid.shape, spec.center_offset, a_out, b_out)
    cov_in = _coverage(grid.shape, spec.center_offset, a_in, b_in)

    if spec.warp_amplitude > 0:
        phi = _smooth_deformation(grid, spec.warp_amplitude,
                                  (PHANTOM_SEED_STREAM, spec.seed, 1))
        intensity = warp_image(ScalarField(grid, intensity), phi).values
        cov_out = warp_image(ScalarField(grid, cov_out), phi).values
        cov_in = warp_image(ScalarField(grid, cov_in), phi).values

    labels = np.zeros(grid.shape, dtype=np.uint8)
    labels[cov_out >= 0.5] = 1
    labels[cov_in >= 0.5] = 2

    if spec.noise_sigma > 0:
        intensity = intensity + rng.normal(0.0, spec.noise_sigma, size=grid.shape)

    measured = ventricle_fraction(labels)
    return Subject(image=ScalarField(grid, intensity),
                   labels=LabelField(grid, labels),
                   condition=measured)


def reference_atlas(grid: Grid = None, condition=0.3) -> Subject:
    """The clean, centered, undeformed template standing in for a
    general-population atlas; its labels double as the atlas labels."""
    spec = PhantomSpec(grid=grid, condition=condition, seed=0,
                       radii_range=(23.0, 23.0), warp_amplitude=0.0,
                       noise_sigma=0.0)
    return make_phantom(spec)


def _excluded_feasible(excluded, gap):
    lo = 0.0
    for v in sorted(excluded):
        if v - gap > lo + 1e-9:
            return True
        lo = max(lo, v + gap)
    return lo < 1.0 - 1e-9


def make_cohort(n, condition_sampler="uniform", seed=0, excluded=(), gap=0.03,
                grid: Grid = None, radii_range=(20.0, 26.0), warp_amplitude=2.5,
                noise_sigma=0.01) -> Cohort:
    """Generate n phantoms with conditions drawn per sampler.

    uniform: c ~ U(0,1). heldout: same, but redrawn while within `gap` of
    any excluded value (the interpolation-ablation cohort).
    """
    if n < 1:
        raise ArgumentError("cohort size must be >= 1")
    if condition_sampler not in ("uniform", "heldout"):
        raise ArgumentError(f"unknown sampler {condition_sampler!r}")
    if condition_sampler == "heldout":
        excluded = [float(v) for v in excluded]
        if not _excluded_feasible(excluded, gap):
            raise ArgumentError("excluded set (with gap) covers all of [0, 1]")
    grid = grid or Grid((64, 64))
    rng = np.random.default_rng([PHANTOM_SEED_STREAM, seed, 0xC0])
    conditions, subjects = [], []
    for i in range(n):
        for _ in range(100000):
            c = float(rng.uniform(0.0, 1.0))
            if condition_sampler == "uniform" or \
                    all(abs(c - v) > gap for v in excluded):
                break
        else:
            raise ArgumentError("condition sampler failed to find admissible draws")
        conditions.append(c)
        subj_seed = int(rng.integers(0, 2 ** 62))
        spec = PhantomSpec(grid=grid, condition=c, seed=subj_seed,
                           radii_range=radii_range, warp_amplitude=warp_amplitude,
                           noise_sigma=noise_sigma)
        subjects.append(make_phantom(spec))
    meta = {"seed": int(seed), "generator": GENERATOR_VERSION,
            "mode": condition_sampler, "requested_conditions": conditions}
    if condition_sampler == "heldout":
        meta["excluded"] = list(excluded)
        meta["gap"] = float(gap)
    return Cohort(subjects=subjects, grid=grid, metadata=meta)
