import numpy as np
import pytest

from diffdef import nets
from diffdef.atlas import Cohort, Subject
from diffdef.autoencoder import (AEConfig, ae_loss_graph, decode_field, encode,
                                 kl_closed_form, train_autoencoder)
from diffdef.engine import ParamStore, Tensor
from diffdef.errors import ArgumentError, ShapeError
from diffdef.fields import Grid, LabelField, ScalarField


def toy_cohort(n, shape=(16, 16), seed=0, constant=None):
    rng = np.random.default_rng(seed)
    g = Grid(shape)
    subs = []
    for k in range(n):
        if constant is not None:
            vals = np.full(shape, constant)
        else:
            vals = rng.standard_normal(shape) * 0.1 + 0.5
        labels = LabelField(g, np.zeros(shape, dtype=np.uint8))
        subs.append(Subject(image=ScalarField(g, vals), labels=labels,
                            condition=float(rng.uniform(0, 1))))
    return Cohort(subjects=subs, grid=g)


# -- KL term ----------------------------------------------------------------------


def test_kl_zero_at_standard_normal():
    m = Tensor(np.zeros((2, 3)))
    lv = Tensor(np.zeros((2, 3)))
    assert float(kl_closed_form(m, lv).data) == 0.0


def test_kl_closed_form_value():
    # KL(N(m, s^2) || N(0,1)) = (m^2 + s^2 - log s^2 - 1) / 2 per element
    m, lv = 0.7, -0.4
    want = 0.5 * (m ** 2 + np.exp(lv) - lv - 1.0)
    got = float(kl_closed_form(Tensor(np.array([m])), Tensor(np.array([lv]))).data)
    assert got == pytest.approx(want, abs=1e-12)


def test_kl_matches_monte_carlo():
    rng = np.random.default_rng(0)
    m, lv = 0.5, 0.3
    s = np.exp(0.5 * lv)
    x = m + s * rng.standard_normal(200000)
    log_q = -0.5 * ((x - m) / s) ** 2 - np.log(s) - 0.5 * np.log(2 * np.pi)
    log_p = -0.5 * x ** 2 - 0.5 * np.log(2 * np.pi)
    mc = log_q - log_p
    se = mc.std() / np.sqrt(mc.size)
    want = float(kl_closed_form(Tensor(np.array([m])), Tensor(np.array([lv]))).data)
    assert abs(mc.mean() - want) < 3 * se + 1e-12


def test_kl_batch_reduction():
    rng = np.random.default_rng(1)
    m = rng.standard_normal((3, 2, 4, 4))
    lv = 0.2 * rng.standard_normal(m.shape)
    per = 0.5 * (m ** 2 + np.exp(lv) - lv - 1.0)
    want = per.sum(axis=(1, 2, 3)).mean()
    got = float(kl_closed_form(Tensor(m), Tensor(lv)).data)
    assert got == pytest.approx(want, abs=1e-10)


# -- config and loss graph ---------------------------------------------------------


def test_ae_config_validation():
    with pytest.raises(ArgumentError):
        AEConfig(latent_shape=(4, 16))
    with pytest.raises(ArgumentError):
        AEConfig(kl_weight=-1.0)
    with pytest.raises(ArgumentError):
        AEConfig(lr=0.0)


def test_ae_loss_graph_combines_terms():
    rng = np.random.default_rng(2)
    cfg = AEConfig(latent_shape=(4, 4, 4), kl_weight=1e-3)
    params = nets.build_autoencoder(ParamStore(), rng, z_channels=4,
                                    field_channels=2)
    x = rng.standard_normal((1, 1, 16, 16))
    eps = rng.standard_normal((1, 4, 4, 4))
    loss, l1, kl = ae_loss_graph(params, x, eps, cfg)
    assert float(loss.data) == pytest.approx(
        float(l1.data) + 1e-3 * float(kl.data), abs=1e-12)
    assert float(l1.data) >= 0 and float(kl.data) >= 0


def test_latent_shape_must_match_grid():
    cohort = toy_cohort(2, shape=(16, 16))
    with pytest.raises(ArgumentError):
        train_autoencoder(cohort, AEConfig(latent_shape=(4, 8, 8)), seed=0)


# -- training ---------------------------------------------------------------------


def test_constant_cohort_reaches_low_l1():
    cohort = toy_cohort(4, shape=(16, 16), constant=0.5)
    cfg = AEConfig(latent_shape=(4, 4, 4), lr=2e-3, epochs=120)
    params = train_autoencoder(cohort, cfg, seed=0)
    assert params.meta["curve"]["l1"][-1] < 1e-2


def test_training_loss_decreases_on_textured_cohort():
    cohort = toy_cohort(8, shape=(16, 16), seed=3)
    cfg = AEConfig(latent_shape=(4, 4, 4), lr=1e-3, epochs=20)
    params = train_autoencoder(cohort, cfg, seed=0)
    curve = params.meta["curve"]["loss"]
    assert curve[-1] < curve[0]
    assert params.meta["grid_shape"] == [16, 16]


def test_training_is_seed_deterministic():
    cohort = toy_cohort(3, shape=(16, 16), seed=4)
    cfg = AEConfig(latent_shape=(4, 4, 4), lr=1e-3, epochs=2)
    a = train_autoencoder(cohort, cfg, seed=7)
    b = train_autoencoder(cohort, cfg, seed=7)
    c = train_autoencoder(cohort, cfg, seed=8)
    assert all(np.array_equal(a[n].data, b[n].data) for n in a.names())
    assert any(not np.array_equal(a[n].data, c[n].data) for n in a.names())


# -- encode / decode ---------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_params():
    rng = np.random.default_rng(5)
    return nets.build_autoencoder(ParamStore(), rng, z_channels=4,
                                  field_channels=2)


def test_encode_mean_path_and_stochastic(tiny_params):
    img = ScalarField(Grid((16, 16)), np.random.default_rng(6).standard_normal((16, 16)))
    lat = encode(tiny_params, img)
    assert lat.mean.data.shape == (4, 4, 4)
    assert np.array_equal(lat.draw.data, lat.mean.data)
    s1 = encode(tiny_params, img, stochastic=True, seed=1)
    s2 = encode(tiny_params, img, stochastic=True, seed=1)
    s3 = encode(tiny_params, img, stochastic=True, seed=2)
    assert np.array_equal(s1.draw.data, s2.draw.data)
    assert not np.array_equal(s1.draw.data, s3.draw.data)
    assert not np.array_equal(s1.draw.data, lat.mean.data)


def test_encode_rejects_bad_sizes(tiny_params):
    img = ScalarField(Grid((18, 16)), np.zeros((18, 16)))
    with pytest.raises(ShapeError):
        encode(tiny_params, img)


def test_decode_field_shapes_and_small_init():
    # a freshly initialized decoder emits near-zero fields (damped head)
    norms = []
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        params = nets.build_autoencoder(ParamStore(), rng, z_channels=4,
                                        field_channels=2)
        z = rng.standard_normal((4, 4, 4))
        phi = decode_field(params, z, grid=Grid((16, 16)))
        assert phi.vectors.shape == (16, 16, 2)
        norms.append(np.sqrt((phi.vectors ** 2).sum(-1)).max())
    assert max(norms) < 10.0


def test_decode_field_validation(tiny_params):
    with pytest.raises(ShapeError):
        decode_field(tiny_params, np.zeros((4, 4)), grid=Grid((16, 16)))
    with pytest.raises(ShapeError):
        decode_field(tiny_params, np.zeros((4, 4, 4)), grid=Grid((32, 32)))
