"""Built-in oracle suite: gradient checks on every layer type and both loss
heads, analytic Jacobian oracles, diffusion round trips, sampler moments
against the Bayes-optimal denoiser, and file round trips. Everything here is
deterministic and runs in well under two minutes on one core."""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from . import analysis, diffusion, nets, nnops
from .autoencoder import AEConfig, ae_loss_graph
from .engine import ParamStore, grad_check, relu, sigmoid
from .fields import DisplacementField, Grid
from .fileio import read_field, write_field

GRAD_TOL = 1e-4


@dataclass
class SelfTestResult:
    name: str
    ok: bool
    detail: str


def _result(name, ok, detail):
    return SelfTestResult(name=name, ok=bool(ok), detail=detail)


def _grad_suites():
    rng = np.random.default_rng(7)
    suites = []

    ps = ParamStore()
    nets.init_conv(ps, "w1", 3, 4, rng)
    nets.init_conv(ps, "w2", 4, 5, rng)
    x = rng.standard_normal((2, 3, 8, 8))

    def conv_loss(P):
        h = relu(nnops.conv2d(x, P["w1.w"], P["w1.b"], stride=1))
        h = nnops.conv2d(h, P["w2.w"], P["w2.b"], stride=2)
        return sigmoid(h).mean()

    suites.append(("grad-conv", conv_loss, ps, 1e-4))

    ps = ParamStore()
    nets.init_dense(ps, "d", 6, 4, rng)
    xd = rng.standard_normal((3, 6))

    def dense_loss(P):
        return relu(nnops.dense(xd, P["d.w"], P["d.b"])).mean()

    suites.append(("grad-dense", dense_loss, ps, 1e-4))

    ps = ParamStore()
    ps.add("x", rng.standard_normal((1, 2, 4, 4)))
    k_up = rng.standard_normal((1, 2, 8, 8))

    def up_loss(P):
        return (nnops.upsample2(P["x"]) * k_up).mean()

    suites.append(("grad-upsample", up_loss, ps, 1e-4))

    ps = ParamStore()
    ps.add("img", rng.standard_normal((1, 1, 6, 6)))
    # fractional flows keep every sample away from bilinear kinks
    ps.add("flow", rng.uniform(0.1, 0.35, size=(1, 2, 6, 6)))

    def warp_loss(P):
        w = nnops.warp2d(P["img"], P["flow"])
        return (w * w).mean()

    suites.append(("grad-warp", warp_loss, ps, 1e-4))

    ps = ParamStore()
    ps.add("x", rng.standard_normal((1, 3, 7, 7)))
    k_box = rng.standard_normal((1, 3, 7, 7))

    def box_loss(P):
        return (nnops.box_sum2d(P["x"], 5) * k_box).mean()

    suites.append(("grad-boxsum", box_loss, ps, 1e-4))

    ps = ParamStore()
    ps.add("a", gaussian_filter(rng.standard_normal((1, 1, 10, 10)), 1.0))
    ps.add("b", gaussian_filter(rng.standard_normal((1, 1, 10, 10)), 1.0))

    def ncc_loss(P):
        return 1.0 - nnops.ncc_squared(P["a"], P["b"], window=5)

    suites.append(("grad-ncc-head", ncc_loss, ps, 1e-4))

    ps = ParamStore()
    ps.add("flow", rng.standard_normal((1, 2, 6, 6)))

    def bend_loss(P):
        return nnops.bending_penalty(P["flow"], spacing=(1.3, 0.7))

    suites.append(("grad-bending-head", bend_loss, ps, 1e-4))

    ps = ParamStore()
    nets.build_autoencoder(ps, rng, z_channels=1)
    cfg = AEConfig(latent_shape=(1, 2, 2))
    xa = gaussian_filter(rng.standard_normal((1, 1, 8, 8)), 1.0)
    ea = rng.standard_normal((1, 1, 2, 2))
    # keep the L1 residual a unit away from its kink so finite differences
    # stay on one side of |.|
    mean0, logvar0 = nets.encoder_forward(ps.frozen(), xa, z_channels=1)
    draw0 = mean0.data + np.exp(logvar0.data * 0.5) * ea
    recon0 = nets.decode_image_tensor(ps.frozen(), draw0).data
    xa = recon0 + np.where(rng.standard_normal(xa.shape) > 0, 1.0, -1.0)

    def ae_loss(P):
        return ae_loss_graph(P, xa, ea, cfg)[0]

    # the deep decoder needs a smaller probe: at 1e-4 the finite difference
    # regularly steps across relu kinks and reports phantom errors
    suites.append(("grad-ae-loss", ae_loss, ps, 1e-5))

    ps = ParamStore()
    nets.build_denoiser(ps, rng, z_channels=2, width=6)
    sched = diffusion.build_schedule()
    z0 = rng.standard_normal((1, 2, 4, 4))
    epn = rng.standard_normal((1, 2, 4, 4))

    def eps_loss(P):
        return diffusion.epsilon_loss_graph(P, z0, 0.4, 37, epn, sched)[0]

    suites.append(("grad-epsilon-loss", eps_loss, ps, 1e-4))
    return suites


def _check_grads():
    out = []
    for name, loss_fn, ps, h in _grad_suites():
        err = grad_check(loss_fn, ps, max_coords=24, seed=3, h=h)
        out.append(_result(name, err < GRAD_TOL, f"max rel err {err:.2e}"))
    return out


def _check_jacobian_affine():
    grid = Grid((9, 7), (1.3, 0.7))
    A = np.array([[0.08, 0.03], [-0.02, 0.05]])
    coords = np.stack(np.meshgrid(*[np.arange(s, dtype=np.float64) for s in grid.shape],
                                  indexing="ij"), axis=-1)
    u = coords @ A.T + np.array([0.4, -0.2])
    det = analysis.jacobian_det_field(DisplacementField(grid, u)).values
    S = np.array([[grid.spacing[i] / grid.spacing[j] for j in range(2)] for i in range(2)])
    expected = np.linalg.det(np.eye(2) + S * A)
    err = float(np.abs(det - expected).max())
    return [_result("jacobian-affine", err < 1e-10, f"max abs err {err:.2e}")]


def _check_folding_brute():
    rng = np.random.default_rng(11)
    grid = Grid((12, 11))
    u = np.stack([gaussian_filter(rng.standard_normal(grid.shape), 1.5)
                  for _ in range(2)], axis=-1) * 4.0
    phi = DisplacementField(grid, u)
    fast = analysis.folding_percent(phi)
    # independent path: assemble every Jacobian explicitly and use linalg.det
    g = [[analysis.apply_along(analysis.d1_matrix(grid.shape[j], grid.spacing[j]),
                               u[..., i] * grid.spacing[i], j) for j in range(2)]
         for i in range(2)]
    count = 0
    for i in range(grid.shape[0]):
        for j in range(grid.shape[1]):
            J = np.eye(2) + np.array([[g[0][0][i, j], g[0][1][i, j]],
                                      [g[1][0][i, j], g[1][1][i, j]]])
            if np.linalg.det(J) < 0:
                count += 1
    brute = 100.0 * count / grid.num_voxels
    return [_result("folding-brute-force", fast == brute,
                    f"fast {fast:.4f}% vs brute {brute:.4f}% ({count} voxels)")]


def _check_z0_roundtrip():
    rng = np.random.default_rng(5)
    sched = diffusion.build_schedule()
    worst = 0.0
    for t in (1, 7, 250, 999, 1000):
        z0 = rng.standard_normal((2, 3, 4, 4))
        eps = rng.standard_normal(z0.shape)
        z_t = diffusion.q_sample(z0, t, eps, sched)
        back = diffusion.estimate_z0(z_t, eps, t, sched)
        worst = max(worst, float(np.abs(back - z0).max()))
    return [_result("z0-roundtrip", worst < 1e-10, f"max abs err {worst:.2e}")]


def _check_field_roundtrip():
    rng = np.random.default_rng(13)
    grid = Grid((7, 5), (1.25, 2.5))
    phi = DisplacementField(grid, rng.standard_normal(grid.shape + (2,)))
    with tempfile.TemporaryDirectory() as d:
        p1, p2 = os.path.join(d, "a.field"), os.path.join(d, "b.field")
        write_field(p1, phi)
        back = read_field(p1)
        write_field(p2, back)
        with open(p1, "rb") as f1, open(p2, "rb") as f2:
            bit_exact = f1.read() == f2.read()
        narrowed = phi.vectors.astype("<f4").astype(np.float64)
        values_ok = np.array_equal(back.vectors, narrowed)
    ok = bit_exact and values_ok and back.grid == grid
    return [_result("field-roundtrip", ok,
                    "bit-exact" if ok else "round trip mismatch")]


def _check_sampler_moments():
    # 2-dim Gaussian target, Bayes-optimal denoiser, batch of 2000 chains
    mu = np.array([0.7, -0.3])
    var = np.array([0.25, 1.7])
    sched = diffusion.build_schedule()

    def model(z, c, t):
        ab = float(sched.abar(t))
        post = (np.sqrt(ab) * var * z + (1.0 - ab) * mu) / (ab * var + 1.0 - ab)
        return (z - np.sqrt(ab) * post) / np.sqrt(1.0 - ab)

    z = diffusion.ddpm_sample(model, 0.0, sched, (2000, 2), n_steps=500, seed=17)
    mean_err = float(np.abs(z.mean(axis=0) - mu).max())
    var_rel = float(np.abs(z.var(axis=0) / var - 1.0).max())
    ok = mean_err < 0.05 and var_rel < 0.10
    return [_result("sampler-moments", ok,
                    f"mean err {mean_err:.3f}, var rel err {var_rel:.3f}")]


def run_selftest():
    """All oracle suites; returns a list of SelfTestResult."""
    results = []
    results += _check_grads()
    results += _check_jacobian_affine()
    results += _check_folding_brute()
    results += _check_z0_roundtrip()
    results += _check_field_roundtrip()
    results += _check_sampler_moments()
    return results
