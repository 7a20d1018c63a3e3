"""DDPM machinery in latent space.

Timesteps are 1-indexed: t runs over 1..T and indexes the coefficient tables
through the helpers, never directly. Sampling walks an evenly strided
subsequence of the training schedule and adds no noise at the final step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nets
from .engine import Tensor, astensor
from .errors import ArgumentError, DomainError, NumericError

EMB_T_WIDTH = 64
EMB_C_REPEATS = 8


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)

    def abar(self, t):
        """alpha_bar at 1-indexed timestep(s) t."""
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ArgumentError(f"t must lie in [1, {self.T}]")
        return self.alpha_bar[t - 1]


def build_schedule(T=1000, beta_start=1e-4, beta_end=2e-2) -> NoiseSchedule:
    """Linear beta ramp with derived alpha and running-product tables."""
    if T < 2:
        raise ArgumentError("T must be at least 2")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ArgumentError("need 0 < beta_start <= beta_end < 1")
    beta = np.linspace(beta_start, beta_end, T)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


@dataclass(frozen=True)
class ConditionEmbedding:
    c: float
    t: int
    vector: np.ndarray = field(repr=False)


def _timestep_features(t):
    """Sinusoidal features of width EMB_T_WIDTH for integer timestep array t."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = EMB_T_WIDTH // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / (half - 1))
    arg = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


def embed_batch(c, t):
    """(B, 72) embedding matrix for condition and timestep arrays."""
    c = np.atleast_1d(np.asarray(c, dtype=np.float64))
    t = np.atleast_1d(np.asarray(t))
    if c.shape != t.shape:
        raise ArgumentError("condition and timestep batches must align")
    if np.any(c < 0.0) or np.any(c > 1.0):
        raise DomainError("conditions must lie in [0, 1]")
    feats = _timestep_features(t)
    rep = np.repeat(c[:, None], EMB_C_REPEATS, axis=1)
    return np.concatenate([feats, rep], axis=1)


def embedding(c, t) -> ConditionEmbedding:
    vec = embed_batch([c], [t])[0]
    return ConditionEmbedding(c=float(c), t=int(t), vector=vec)


def _corrupt(z0, abar, eps):
    return np.sqrt(abar) * z0 + np.sqrt(1.0 - abar) * eps


def _per_batch(t, sched, ndim):
    """abar values shaped to broadcast over a batched tensor."""
    ab = sched.abar(t)
    if np.ndim(ab) == 0:
        return float(ab)
    return ab.reshape((-1,) + (1,) * (ndim - 1))


def q_sample(z0, t, eps, sched) -> np.ndarray:
    """Closed-form forward corruption z_t."""
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise ArgumentError("z0 and eps must share a shape")
    return _corrupt(z0, _per_batch(t, sched, z0.ndim), eps)


def estimate_z0(z_t, eps_hat, t, sched):
    """One-step inversion of q_sample. Works on arrays and engine tensors."""
    if isinstance(z_t, Tensor) or isinstance(eps_hat, Tensor):
        z_t, eps_hat = astensor(z_t), astensor(eps_hat)
        ab = _per_batch(t, sched, z_t.data.ndim)
        return (z_t - np.sqrt(1.0 - ab) * eps_hat) * (1.0 / np.sqrt(ab))
    z_t = np.asarray(z_t, dtype=np.float64)
    ab = _per_batch(t, sched, z_t.ndim)
    return (z_t - np.sqrt(1.0 - ab) * np.asarray(eps_hat)) / np.sqrt(ab)


def epsilon_loss_graph(params, z0, c, t, eps, sched, model=None):
    """Tensor-valued ε-prediction MSE; shared by training loops.

    Returns (loss, eps_hat, z_t). ``model`` overrides the stock denoiser with
    a callable (z_t tensor, embedding matrix) -> tensor.
    """
    z0 = np.atleast_1d(np.asarray(z0, dtype=np.float64))
    if z0.ndim == 3:
        z0 = z0[None]
    eps = np.asarray(eps, dtype=np.float64).reshape(z0.shape)
    ts = np.atleast_1d(np.asarray(t))
    cs = np.atleast_1d(np.asarray(c, dtype=np.float64))
    if ts.size == 1:
        ts = np.repeat(ts, z0.shape[0])
    if cs.size == 1:
        cs = np.repeat(cs, z0.shape[0])
    z_t = q_sample(z0, ts, eps, sched)
    emb = embed_batch(cs, ts)
    if model is None:
        eps_hat = nets.denoiser_forward(params, astensor(z_t), emb)
    else:
        eps_hat = model(astensor(z_t), emb)
    loss = ((eps_hat - eps) ** 2).mean()
    return loss, eps_hat, z_t


def epsilon_loss(params, z0, c, t, eps, sched, model=None) -> float:
    """MSE between eps and the denoiser prediction; grads left in params."""
    params.zero_grads()
    loss, _, _ = epsilon_loss_graph(params, z0, c, t, eps, sched, model=model)
    loss.backward()
    value = float(loss.data)
    if not np.isfinite(value):
        raise NumericError("epsilon loss is not finite")
    return value


def sample_timesteps(n_steps, T):
    """Evenly strided ascending subsequence of 1..T ending at T."""
    if not (1 <= n_steps <= T):
        raise ArgumentError("need 1 <= n_steps <= T")
    return np.unique(np.round(np.linspace(1, T, n_steps)).astype(np.int64))


def ddpm_sample(model, c, sched, shape, n_steps=500, seed=0, clip_z0=None):
    """Ancestral sampling from pure noise.

    model: callable (z_t array, c, t) -> eps_hat array. Deterministic given
    seed. clip_z0 optionally clamps the intermediate clean-latent estimate
    to [-clip_z0, clip_z0].
    """
    rng = np.random.default_rng(seed)
    taus = sample_timesteps(n_steps, sched.T)
    z = rng.standard_normal(shape)
    for k in range(len(taus) - 1, 0, -1):
        t, s = int(taus[k]), int(taus[k - 1])
        eps_hat = np.asarray(model(z, c, t))
        z0 = estimate_z0(z, eps_hat, t, sched)
        if clip_z0 is not None:
            z0 = np.clip(z0, -clip_z0, clip_z0)
        ab_t, ab_s = float(sched.abar(t)), float(sched.abar(s))
        a_eff = ab_t / ab_s
        b_eff = 1.0 - a_eff
        mean = (np.sqrt(ab_s) * b_eff / (1.0 - ab_t)) * z0 \
            + (np.sqrt(a_eff) * (1.0 - ab_s) / (1.0 - ab_t)) * z
        var = b_eff * (1.0 - ab_s) / (1.0 - ab_t)
        z = mean + np.sqrt(var) * rng.standard_normal(shape)
    t0 = int(taus[0])
    eps_hat = np.asarray(model(z, c, t0))
    z0 = estimate_z0(z, eps_hat, t0, sched)
    if clip_z0 is not None:
        z0 = np.clip(z0, -clip_z0, clip_z0)
    if not np.isfinite(z0).all():
        raise NumericError("sampler produced non-finite values")
    return z0
