"""Conditional atlas construction.

Joint training couples three frozen-or-trainable pieces: the frozen latent
encoder, the trainable denoiser + field decoder, and a frozen registration
net that scores how far the warped atlas sits from a condition-matched
neighborhood of subjects. Total loss per step:

    L = L_diff + alpha * L_morph + beta * bending(phi_c)

L_morph is the mean squared displacement (per voxel, averaged over the
neighborhood) of the fields registering the warped atlas to each neighbor.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import analysis, diffusion, nets, nnops
from .autoencoder import AEConfig, encode
from .engine import (AdamState, ParamStore, Tensor, adam_step, astensor,
                     broadcast_to, clip, concat, reduce_sum)
from .errors import ArgumentError, DomainError, NumericError, ShapeError
from .fields import (DisplacementField, Grid, LabelField, ScalarField,
                     warp_image, warp_labels)
from .registration import RegConfig, iterative_register

VENTRICLE_LABEL = 2
ATLAS_SEED_STREAM = 0xA71A
Z0_CLIP = 4.0


@dataclass
class Subject:
    image: ScalarField
    labels: LabelField
    condition: float

    def __post_init__(self):
        if self.image.grid != self.labels.grid:
            raise ShapeError("subject image and labels must share a grid")
        c = float(self.condition)
        if not np.isfinite(c) or not (0.0 <= c <= 1.0):
            raise DomainError(f"condition must be in [0, 1], got {self.condition}")
        self.condition = c


@dataclass
class Cohort:
    subjects: list
    grid: Grid
    metadata: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        if not self.subjects:
            raise ArgumentError("cohort must be non-empty")
        for s in self.subjects:
            if s.image.grid != self.grid:
                raise ShapeError("all subjects must live on the cohort grid")

    def __len__(self):
        return len(self.subjects)

    @property
    def conditions(self):
        return np.array([s.condition for s in self.subjects])


@dataclass
class Neighborhood:
    members: list  # (Subject, weight) pairs, weights in (0, 1]

    def __len__(self):
        return len(self.members)

    def images(self):
        """Member images stacked as (N, 1, H, W)."""
        return np.stack([m.image.values for m, _ in self.members])[:, None]


@dataclass
class DiffDefConfig:
    alpha: float = 1.0
    beta: float = 0.5
    n_neighbors: int = 15
    sigma: float = 0.05
    epochs: int = 30
    lr: float = 2.5e-5
    inference_steps: int = 500

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ArgumentError("alpha and beta must be >= 0")
        if self.n_neighbors < 1:
            raise ArgumentError("n_neighbors must be >= 1")
        if self.sigma <= 0:
            raise ArgumentError("sigma must be positive")
        if self.epochs < 1 or self.lr <= 0 or self.inference_steps < 1:
            raise ArgumentError("epochs, lr and inference_steps must be positive")


def sample_neighborhood(cohort: Cohort, c, n, sigma, seed) -> Neighborhood:
    """Draw n subjects without replacement, weighted by the Gaussian kernel
    exp(-(c_i - c)^2 / (2 sigma^2)).

    Stored weights are the kernel values rescaled so the best match has
    weight 1; the rescaling cancels in the sampling probabilities and keeps
    weights in (0, 1] even when every subject is many sigma away.
    """
    if len(cohort) < n:
        raise ArgumentError(f"cohort of {len(cohort)} cannot supply {n} neighbors")
    lw = -((cohort.conditions - float(c)) ** 2) / (2.0 * sigma ** 2)
    w = np.exp(lw - lw.max())
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    idx = rng.choice(len(cohort), size=n, replace=False, p=w / w.sum())
    return Neighborhood(members=[(cohort.subjects[i], float(w[i])) for i in idx])


def _atlas_batch(atlas, n, spatial):
    """Normalize the atlas argument to a (n,1,H,W) tensor node."""
    if isinstance(atlas, ScalarField):
        if atlas.grid.shape != spatial:
            raise ShapeError(f"atlas grid {atlas.grid.shape} != neighbor grid {spatial}")
        t = astensor(atlas.values[None, None])
    else:
        t = astensor(atlas)
        if t.data.ndim != 4 or t.data.shape[2:] != spatial:
            raise ShapeError(f"atlas batch shape {t.data.shape} does not match {spatial}")
    return broadcast_to(t, (n, 1) + spatial)


def morphology_loss(atlas, nbhd: Neighborhood, regnet):
    """Mean squared per-voxel displacement registering the atlas to each
    neighbor; differentiable in the atlas. regnet is a trained parameter
    store (used frozen) or any callable (pair batch) -> flow batch."""
    images = nbhd.images()
    n = images.shape[0]
    atlas_b = _atlas_batch(atlas, n, images.shape[2:])
    pair = concat([atlas_b, astensor(images)], axis=1)
    if callable(regnet) and not isinstance(regnet, (ParamStore, dict)):
        flow = astensor(regnet(pair))
    else:
        P = regnet.frozen() if isinstance(regnet, ParamStore) else regnet
        flow = nets.regnet_forward(P, pair)
    return reduce_sum(flow * flow, axis=1).mean()


@dataclass
class DiffDefModel:
    params: ParamStore
    regnet: object
    sched: diffusion.NoiseSchedule
    cfg: DiffDefConfig
    grid: Grid
    latent_shape: tuple
    latent_mean: float
    latent_std: float
    curve: dict


def _trainable_names(params):
    keep = ("dn.",) + nets.DECODER_TRAIN_PREFIXES
    return [n for n in params.names() if n.startswith(keep)]


def train_diffdef(cohort: Cohort, a_ref: ScalarField, ae_params, regnet_params,
                  cfg: DiffDefConfig = None, seed=0, sched=None) -> DiffDefModel:
    """Joint denoiser + decoder training against the frozen encoder and
    registration net. Aborts with the last end-of-epoch checkpoint attached
    if the loss goes non-finite."""
    cfg = cfg or DiffDefConfig()
    sched = sched or diffusion.build_schedule()
    if a_ref.grid != cohort.grid:
        raise ShapeError("reference atlas must live on the cohort grid")
    if cfg.alpha > 0 and len(cohort) < cfg.n_neighbors:
        raise ArgumentError("cohort smaller than n_neighbors")
    rng = np.random.default_rng([ATLAS_SEED_STREAM, seed])

    lat = ae_params.meta.get("latent_shape") if hasattr(ae_params, "meta") else None
    z_ch = int(lat[0]) if lat else 4
    params = ParamStore()
    for name, t in ae_params.items():
        params.add(name, t.data.copy())
    nets.build_denoiser(params, rng, z_channels=z_ch)
    params.meta["grid_shape"] = list(cohort.grid.shape)

    # encoder is frozen, so each subject's latent is a constant of training
    latents = np.stack([encode(ae_params, s.image).mean.data for s in cohort.subjects])
    mu = float(latents.mean())
    sd = float(latents.std())
    if sd < 1e-12:
        sd = 1.0
    latents_n = (latents - mu) / sd
    conditions = cohort.conditions
    aref_b = a_ref.values[None, None]

    names = _trainable_names(params)
    state = AdamState(lr=cfg.lr)
    n = len(cohort)
    curve = {"loss": [], "diff": []}
    if cfg.alpha > 0:
        curve["morph"] = []
    if cfg.beta > 0:
        curve["bend"] = []
    last_good = params.state_dict()
    for epoch in range(cfg.epochs):
        sums = {k: 0.0 for k in curve}
        for _ in range(n):
            j = int(rng.integers(n))
            c = float(conditions[j])
            t = int(rng.integers(1, sched.T + 1))
            eps = rng.standard_normal(latents_n[j].shape)
            params.zero_grads()
            l_diff, eps_hat, z_t = diffusion.epsilon_loss_graph(
                params, latents_n[j][None], c, t, eps, sched)
            loss = l_diff
            z0_hat = diffusion.estimate_z0(astensor(z_t), eps_hat, t, sched)
            z0_hat = clip(z0_hat, -Z0_CLIP, Z0_CLIP) * sd + mu
            flow = nets.decode_field_tensor(params, z0_hat)
            sums["diff"] += float(l_diff.data)
            if cfg.beta > 0:
                l_bend = nnops.bending_penalty(flow, spacing=a_ref.grid.spacing)
                loss = loss + cfg.beta * l_bend
                sums["bend"] += float(l_bend.data)
            if cfg.alpha > 0:
                warped = nnops.warp2d(aref_b, flow)
                nbhd = sample_neighborhood(cohort, c, cfg.n_neighbors, cfg.sigma, rng)
                l_morph = morphology_loss(warped, nbhd, regnet_params)
                loss = loss + cfg.alpha * l_morph
                sums["morph"] += float(l_morph.data)
            loss.backward()
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericError("diffdef loss went non-finite", last_good=last_good)
            adam_step(params, state, names=names)
            sums["loss"] += value
        for k in curve:
            curve[k].append(sums[k] / n)
        last_good = params.state_dict()
    return DiffDefModel(
        params=params, regnet=regnet_params, sched=sched, cfg=cfg,
        grid=cohort.grid, latent_shape=tuple(latents.shape[1:]),
        latent_mean=mu, latent_std=sd, curve=curve,
    )


def generate_atlas(model: DiffDefModel, a_ref: ScalarField, c, seed=0, n_steps=None):
    """Sample a latent at condition c, decode it to a field, warp the
    reference. Returns (phi_c, atlas); the pair stays exactly consistent
    because phi_c is rounded to file precision before the warp."""
    c = float(c)
    if not (0.0 <= c <= 1.0):
        raise DomainError(f"condition must be in [0, 1], got {c}")
    if a_ref.grid != model.grid:
        raise ShapeError("reference atlas must live on the model grid")
    P = model.params.frozen()

    def eps_model(z, cond, t):
        emb = diffusion.embed_batch(cond, t)
        return nets.denoiser_forward(P, astensor(z[None]), emb).data[0]

    steps = n_steps or model.cfg.inference_steps
    z = diffusion.ddpm_sample(eps_model, c, model.sched, model.latent_shape,
                              n_steps=steps, seed=seed, clip_z0=Z0_CLIP)
    z = z * model.latent_std + model.latent_mean
    flow = nets.decode_field_tensor(P, z[None]).data[0]
    phi = np.moveaxis(flow, 0, -1).astype(np.float32).astype(np.float64)
    phi_c = DisplacementField(a_ref.grid, phi)
    return phi_c, warp_image(a_ref, phi_c)


def linear_atlas(nbhd: Neighborhood) -> ScalarField:
    """Plain voxelwise mean of the neighborhood images."""
    if len(nbhd) == 0:
        raise ArgumentError("neighborhood must be non-empty")
    grid = nbhd.members[0][0].image.grid
    return ScalarField(grid, np.mean([m.image.values for m, _ in nbhd.members], axis=0))


def unbiased_iterative_atlas(nbhd: Neighborhood, reference: ScalarField,
                             cfg: RegConfig = None) -> ScalarField:
    """Register every member to the reference, average the warped images,
    then undo the reference bias by warping with the negated mean field."""
    if len(nbhd) == 0:
        raise ArgumentError("neighborhood must be non-empty")
    cfg = cfg or RegConfig()
    warped, vecs = [], []
    for subject, _ in nbhd.members:
        if subject.image.grid != reference.grid:
            raise ShapeError("neighborhood and reference grids must match")
        res = iterative_register(reference, subject.image, cfg)
        warped.append(warp_image(subject.image, res.phi).values)
        vecs.append(res.phi.vectors)
    avg = ScalarField(reference.grid, np.mean(warped, axis=0))
    unbias = DisplacementField(reference.grid, -np.mean(vecs, axis=0))
    return warp_image(avg, unbias)


def evaluate_atlas(atlas: ScalarField, atlas_labels: LabelField, testset,
                   cfg: RegConfig = None) -> analysis.AtlasMetrics:
    """Register each test subject to the atlas, propagate its labels, and
    aggregate overlap and field-quality metrics."""
    if not testset:
        raise ArgumentError("testset must be non-empty")
    if atlas.grid != atlas_labels.grid:
        raise ShapeError("atlas and atlas labels must share a grid")
    cfg = cfg or RegConfig()
    rows = []
    for subject in testset:
        if subject.image.grid != atlas.grid:
            raise ShapeError("test subject grid does not match the atlas")
        res = iterative_register(atlas, subject.image, cfg)
        moved = warp_labels(subject.labels, res.phi)
        rows.append({
            "condition": subject.condition,
            "dice": analysis.dice_score(moved, atlas_labels, VENTRICLE_LABEL),
            "folding_pct": analysis.folding_percent(res.phi),
            "smoothness": analysis.smoothness_metric(res.phi),
            "avg_disp": analysis.displacement_norm(res.phi),
            "similarity": res.final_similarity,
        })
    dices = np.array([r["dice"] for r in rows])
    return analysis.AtlasMetrics(
        dice_mean=float(dices.mean()),
        dice_std=float(dices.std()),
        folding_pct=float(np.mean([r["folding_pct"] for r in rows])),
        smoothness=float(np.mean([r["smoothness"] for r in rows])),
        avg_disp=float(np.mean([r["avg_disp"] for r in rows])),
        per_subject=rows,
    )
