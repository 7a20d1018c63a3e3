"""Variational image autoencoder with a widened field-decoding head.

The encoder compresses an image by a factor of 4 per axis into a small latent
field; the decoder reconstructs intensities during pretraining and, through a
second linear head scaled by a learnable gain, decodes latents into
displacement fields during conditional-atlas training.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import nets
from .engine import ParamStore, Tensor, AdamState, adam_step, exp, absolute, astensor
from .errors import ArgumentError, NumericError, ShapeError
from .fields import DisplacementField, Grid

AE_SEED_STREAM = 0x0AE0


@dataclass
class AEConfig:
    latent_shape: tuple = (4, 16, 16)
    kl_weight: float = 1e-8
    lr: float = 5e-5
    epochs: int = 30

    def __post_init__(self):
        self.latent_shape = tuple(int(s) for s in self.latent_shape)
        if len(self.latent_shape) != 3:
            raise ArgumentError("latent_shape must be (channels, h, w)")
        if self.kl_weight < 0:
            raise ArgumentError("kl_weight must be >= 0")
        if self.lr <= 0:
            raise ArgumentError("lr must be positive")


@dataclass(frozen=True)
class LatentSample:
    mean: Tensor
    log_variance: Tensor
    draw: Tensor


def kl_closed_form(mean, logvar):
    """KL(q || N(0,1)) for a diagonal Gaussian, summed over latent dims.

    Accepts engine tensors (graph-aware) and returns a scalar tensor; batch
    inputs are averaged over the leading axis.
    """
    mean, logvar = astensor(mean), astensor(logvar)
    per_elem = (mean ** 2 + exp(logvar) - logvar - 1.0) * 0.5
    if per_elem.ndim == 4:
        return per_elem.sum(axis=(1, 2, 3)).mean()
    return per_elem.sum()


def _check_latent(cfg, grid):
    ch, lh, lw = cfg.latent_shape
    if grid.dim != 2:
        raise ArgumentError("autoencoder training is 2D")
    h, w = grid.shape
    if h % 4 or w % 4 or (lh, lw) != (h // 4, w // 4):
        raise ArgumentError(
            f"latent spatial size {(lh, lw)} must equal image size / 4 = {(h // 4, w // 4)}")
    return ch


def ae_loss_graph(params, x, eps, cfg):
    """L1 reconstruction + weighted KL on one batch. Returns (loss, l1, kl)."""
    z_ch = cfg.latent_shape[0]
    mean, logvar = nets.encoder_forward(params, x, z_channels=z_ch)
    draw = mean + exp(logvar * 0.5) * eps
    recon = nets.decode_image_tensor(params, draw)
    l1 = absolute(recon - x).mean()
    kl = kl_closed_form(mean, logvar)
    return l1 + cfg.kl_weight * kl, l1, kl


def train_autoencoder(cohort, cfg: AEConfig, seed=0) -> ParamStore:
    """Train encoder and decoder on cohort images; curve in params.meta."""
    if not cohort.subjects:
        raise ArgumentError("cohort is empty")
    grid = cohort.grid
    z_ch = _check_latent(cfg, grid)
    rng = np.random.default_rng([AE_SEED_STREAM, seed])
    params = nets.build_autoencoder(ParamStore(), rng, z_channels=z_ch,
                                    field_channels=grid.dim)
    params.meta["grid_shape"] = list(grid.shape)
    params.meta["grid_spacing"] = list(grid.spacing)
    params.meta["latent_shape"] = list(cfg.latent_shape)
    images = np.stack([s.image.values for s in cohort.subjects])[:, None]
    n = images.shape[0]
    state = AdamState(lr=cfg.lr)
    curve = {"l1": [], "kl": [], "loss": []}
    last_good = params.state_dict()
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        l1s, kls, totals = [], [], []
        for j in order:
            x = images[j:j + 1]
            eps = rng.standard_normal((1,) + cfg.latent_shape)
            params.zero_grads()
            loss, l1, kl = ae_loss_graph(params, x, eps, cfg)
            loss.backward()
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericError("autoencoder loss went non-finite",
                                   last_good=last_good)
            adam_step(params, state)
            l1s.append(float(l1.data))
            kls.append(float(kl.data))
            totals.append(value)
        curve["l1"].append(float(np.mean(l1s)))
        curve["kl"].append(float(np.mean(kls)))
        curve["loss"].append(float(np.mean(totals)))
        last_good = params.state_dict()
    params.meta["curve"] = curve
    return params


def _training_grid(params):
    shape = params.meta.get("grid_shape") if hasattr(params, "meta") else None
    if shape is None:
        return None
    spacing = params.meta.get("grid_spacing")
    return Grid(tuple(shape), tuple(spacing) if spacing else None)


def encode(params, image, stochastic=False, seed=0) -> LatentSample:
    """Posterior mean/log-variance for one image; draw = mean unless stochastic."""
    grid = _training_grid(params)
    if grid is not None and image.grid.shape != grid.shape:
        raise ShapeError(f"image grid {image.grid.shape} != training grid {grid.shape}")
    if image.grid.shape[0] % 4 or image.grid.shape[1] % 4:
        raise ShapeError("encode needs spatial sizes divisible by 4")
    P = params.frozen() if isinstance(params, ParamStore) else params
    lat = params.meta.get("latent_shape") if hasattr(params, "meta") else None
    z_ch = int(lat[0]) if lat else 4
    x = image.values[None, None]
    mean, logvar = nets.encoder_forward(P, x, z_channels=z_ch)
    mean_a, logvar_a = mean.data[0], logvar.data[0]
    if stochastic:
        rng = np.random.default_rng([AE_SEED_STREAM + 1, seed])
        draw = mean_a + np.exp(0.5 * logvar_a) * rng.standard_normal(mean_a.shape)
    else:
        draw = mean_a.copy()
    return LatentSample(mean=Tensor(mean_a), log_variance=Tensor(logvar_a),
                        draw=Tensor(draw))


def decode_field(params, latent, grid=None) -> DisplacementField:
    """Decode one latent to a displacement field on the image grid."""
    if grid is None:
        grid = _training_grid(params)
    z = latent.data if isinstance(latent, Tensor) else np.asarray(latent, dtype=np.float64)
    if z.ndim == 3:
        z = z[None]
    if z.ndim != 4:
        raise ShapeError(f"latent must be (channels, h, w), got shape {z.shape}")
    if grid is None:
        grid = Grid((z.shape[2] * 4, z.shape[3] * 4))
    if (z.shape[2] * 4, z.shape[3] * 4) != tuple(grid.shape):
        raise ShapeError(f"latent spatial size {z.shape[2:]} does not decode to {grid.shape}")
    P = params.frozen() if isinstance(params, ParamStore) else params
    out = nets.decode_field_tensor(P, z).data[0]
    if out.shape[0] != grid.dim:
        raise ShapeError("decoder head channel count does not match grid dim")
    return DisplacementField(grid, np.moveaxis(out, 0, -1))
