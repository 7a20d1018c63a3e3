"""Deformable registration: iterative multi-resolution optimization and a
convolutional registration network.

Both minimize similarity + reg_weight * bending. Similarity is (1 - ncc)
with the squared windowed ZNCC, or plain SSD. The iterative path does plain
gradient descent with a voxel-scaled step and halves the step on rejection,
so the objective is monotone over accepted iterates.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import analysis, nets, nnops
from .engine import ParamStore, Tensor, AdamState, adam_step
from .errors import ArgumentError, NumericError, ShapeError
from .fields import (BorderPolicy, DisplacementField, ScalarField, _sample_values,
                     warp_image)

REG_SEED_STREAM = 0x0E6
MAX_CONSECUTIVE_REJECTS = 12


@dataclass
class RegConfig:
    similarity: str = "ncc"
    window: int = 9
    reg_weight: float = 0.1
    levels: int = 4
    iters_per_level: int = 100
    lr: float = 0.1
    net_lr: float = 3e-3
    net_epochs: int = 100
    net_batch: int = 8

    def __post_init__(self):
        if self.similarity not in ("ncc", "ssd"):
            raise ArgumentError(f"similarity must be ncc or ssd, got {self.similarity!r}")
        if self.levels < 1:
            raise ArgumentError("levels must be >= 1")
        if self.reg_weight < 0:
            raise ArgumentError("reg_weight must be >= 0")
        if self.iters_per_level <= 0:
            raise ArgumentError("iters_per_level must be positive")
        if self.window < 3 or self.window % 2 == 0:
            raise ArgumentError("window must be odd and >= 3")


@dataclass
class RegistrationResult:
    phi: DisplacementField
    final_similarity: float
    final_bending: float
    iterations_run: int
    diverged: bool = False


def downsample2(values):
    """2x2 block mean; odd sizes replicate the last row/column first."""
    v = np.asarray(values, dtype=np.float64)
    if v.shape[0] % 2:
        v = np.concatenate([v, v[-1:]], axis=0)
    if v.shape[1] % 2:
        v = np.concatenate([v, v[:, -1:]], axis=1)
    return v.reshape(v.shape[0] // 2, 2, v.shape[1] // 2, 2).mean(axis=(1, 3))


def _upsample_field(phi, new_shape):
    """Bilinear x2 field upsampling; values double (voxel units rescale)."""
    fine = np.stack(np.meshgrid(*[np.arange(s, dtype=np.float64) for s in new_shape],
                                indexing="ij"), axis=-1)
    pts = ((fine - 0.5) / 2.0).reshape(-1, 2)
    sampled = _sample_values(phi * 2.0, pts, BorderPolicy.CLAMP)
    return sampled.reshape(new_shape + (2,))


def _similarity_loss(fixed_t, warped_t, cfg):
    if cfg.similarity == "ncc":
        return 1.0 - nnops.ncc_squared(fixed_t, warped_t, window=cfg.window)
    diff = warped_t - fixed_t
    return (diff * diff).mean()


def _similarity_value(fixed, warped, cfg):
    """The similarity actually reported: ncc in [0,1], or the SSD mean."""
    if cfg.similarity == "ncc":
        return analysis.ncc(fixed, warped, window=cfg.window)
    return float(np.mean((warped.values - fixed.values) ** 2))


def iterative_register(fixed: ScalarField, moving: ScalarField, cfg: RegConfig = None):
    """Coarse-to-fine gradient-descent registration of moving onto fixed."""
    cfg = cfg or RegConfig()
    if fixed.grid != moving.grid:
        raise ShapeError("fixed and moving must share a grid")
    pyr_f, pyr_m = [fixed.values], [moving.values]
    for _ in range(cfg.levels - 1):
        pyr_f.append(downsample2(pyr_f[-1]))
        pyr_m.append(downsample2(pyr_m[-1]))
    phi = np.zeros(pyr_f[-1].shape + (2,))
    total_iters = 0
    diverged = False
    for level in range(cfg.levels - 1, -1, -1):
        f_l, m_l = pyr_f[level], pyr_m[level]
        if phi.shape[:2] != f_l.shape:
            phi = _upsample_field(phi, f_l.shape)
        f_t = f_l[None, None]
        m_t = m_l[None, None]

        def level_loss(phi_arr, need_grad):
            p = Tensor(np.moveaxis(phi_arr, -1, 0)[None], requires_grad=need_grad)
            warped = nnops.warp2d(m_t, p)
            loss = _similarity_loss(f_t, warped, cfg)
            if cfg.reg_weight > 0:
                loss = loss + cfg.reg_weight * nnops.bending_penalty(p)
            if need_grad:
                loss.backward()
                return float(loss.data), np.moveaxis(p.grad[0], 0, -1)
            return float(loss.data), None

        current, _ = level_loss(phi, False)
        if not np.isfinite(current):
            diverged = True
            break
        lr = cfg.lr
        rejects = 0
        for _ in range(cfg.iters_per_level):
            total_iters += 1
            _, grad = level_loss(phi, True)
            gmax = np.abs(grad).max()
            if gmax == 0.0 or not np.isfinite(gmax):
                break
            candidate = phi - (lr / gmax) * grad
            value, _ = level_loss(candidate, False)
            if np.isfinite(value) and value < current:
                phi = candidate
                current = value
                rejects = 0
            else:
                lr *= 0.5
                rejects += 1
                if rejects >= MAX_CONSECUTIVE_REJECTS:
                    break
    grid = fixed.grid
    phi_field = DisplacementField(grid, phi)
    warped = warp_image(moving, phi_field)
    return RegistrationResult(
        phi=phi_field,
        final_similarity=_similarity_value(fixed, warped, cfg),
        final_bending=analysis.bending_energy(phi_field),
        iterations_run=total_iters,
        diverged=diverged,
    )


def regnet_loss_graph(P, fixed_b, moving_b, cfg):
    """Training loss of the registration net on a (B,1,H,W) pair batch."""
    pair = np.concatenate([fixed_b, moving_b], axis=1)
    flow = nets.regnet_forward(P, Tensor(pair))
    warped = nnops.warp2d(moving_b, flow)
    loss = _similarity_loss(Tensor(fixed_b), warped, cfg)
    if cfg.reg_weight > 0:
        loss = loss + cfg.reg_weight * nnops.bending_penalty(flow)
    return loss


def train_regnet(cohort, cfg: RegConfig = None, seed=0) -> ParamStore:
    """Train the pairwise registration net on random cohort pairs."""
    cfg = cfg or RegConfig()
    subjects = cohort.subjects
    if len(subjects) < 2:
        raise ArgumentError("regnet training needs at least 2 subjects")
    rng = np.random.default_rng([REG_SEED_STREAM, seed])
    params = nets.build_regnet(ParamStore(), rng, field_channels=cohort.grid.dim)
    params.meta["grid_shape"] = list(cohort.grid.shape)
    images = np.stack([s.image.values for s in subjects])[:, None]
    n = images.shape[0]
    batch = min(cfg.net_batch, n)
    steps_per_epoch = max(1, n // batch)
    state = AdamState(lr=cfg.net_lr)
    curve = []
    last_good = params.state_dict()
    for epoch in range(cfg.net_epochs):
        losses = []
        for _ in range(steps_per_epoch):
            fi = rng.integers(0, n, size=batch)
            mi = rng.integers(0, n, size=batch)
            mi = np.where(mi == fi, (mi + 1) % n, mi)
            params.zero_grads()
            loss = regnet_loss_graph(params, images[fi], images[mi], cfg)
            loss.backward()
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericError("regnet loss went non-finite", last_good=last_good)
            adam_step(params, state)
            losses.append(value)
        curve.append(float(np.mean(losses)))
        last_good = params.state_dict()
    params.meta["curve"] = curve
    return params


def regnet_predict(params, fixed: ScalarField, moving: ScalarField,
                   cfg: RegConfig = None) -> RegistrationResult:
    """Single deterministic forward pass of the trained net."""
    cfg = cfg or RegConfig()
    if fixed.grid != moving.grid:
        raise ShapeError("fixed and moving must share a grid")
    meta_shape = params.meta.get("grid_shape") if isinstance(params, ParamStore) else None
    if meta_shape is not None and tuple(meta_shape) != fixed.grid.shape:
        raise ShapeError(f"grid {fixed.grid.shape} != training grid {tuple(meta_shape)}")
    P = params.frozen() if isinstance(params, ParamStore) else params
    pair = np.stack([fixed.values, moving.values])[None]
    flow = nets.regnet_forward(P, pair.reshape(1, 2, *fixed.grid.shape)).data[0]
    phi = DisplacementField(fixed.grid, np.moveaxis(flow, 0, -1))
    warped = warp_image(moving, phi)
    return RegistrationResult(
        phi=phi,
        final_similarity=_similarity_value(fixed, warped, cfg),
        final_bending=analysis.bending_energy(phi),
        iterations_run=0,
    )
