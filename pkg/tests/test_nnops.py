import numpy as np
import pytest
from scipy.signal import correlate2d

from diffdef import nnops
from diffdef.analysis import bending_energy, box_sum, ncc
from diffdef.engine import ParamStore, Tensor, grad_check, reduce_sum
from diffdef.errors import ShapeError
from diffdef.fields import DisplacementField, Grid, ScalarField, warp_image


# -- convolution ------------------------------------------------------------------


def test_conv2d_matches_scipy_correlate():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 8, 9))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    out = nnops.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    assert out.shape == (2, 4, 8, 9)
    for n in range(2):
        for co in range(4):
            want = sum(correlate2d(x[n, ci], w[co, ci], mode="same")
                       for ci in range(3)) + b[co]
            assert np.allclose(out[n, co], want, atol=1e-12)


def test_conv2d_stride2_subsamples_stride1():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 2, 10, 10))
    w = rng.standard_normal((3, 2, 3, 3))
    full = nnops.conv2d(Tensor(x), Tensor(w), stride=1).data
    half = nnops.conv2d(Tensor(x), Tensor(w), stride=2).data
    assert half.shape == (1, 3, 5, 5)
    assert np.allclose(half, full[:, :, ::2, ::2], atol=1e-12)


@pytest.mark.parametrize("stride", [1, 2])
def test_conv2d_grad_check(stride):
    rng = np.random.default_rng(2)
    ps = ParamStore()
    ps.add("x", rng.standard_normal((2, 2, 6, 6)))
    ps.add("w", 0.3 * rng.standard_normal((3, 2, 3, 3)))
    ps.add("b", rng.standard_normal(3))

    def loss_fn(p):
        out = nnops.conv2d(p["x"], p["w"], p["b"], stride=stride)
        return reduce_sum(out * out)

    assert grad_check(loss_fn, ps, h=1e-5, max_coords=32, seed=0) < 1e-6


def test_upsample2_layout_and_adjoint():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]), requires_grad=True)
    up = nnops.upsample2(x)
    want = np.array([[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]],
                    dtype=np.float64)
    assert np.array_equal(up.data[0, 0], want)
    reduce_sum(up).backward()
    assert np.array_equal(x.grad, np.full((1, 1, 2, 2), 4.0))


def test_dense_shapes_and_grads():
    rng = np.random.default_rng(3)
    ps = ParamStore()
    ps.add("x", rng.standard_normal((4, 5)))
    ps.add("w", rng.standard_normal((5, 3)))
    ps.add("b", rng.standard_normal(3))

    def loss_fn(p):
        return reduce_sum(nnops.dense(p["x"], p["w"], p["b"]) ** 2.0)

    out = nnops.dense(Tensor(np.ones((1, 5))), Tensor(np.eye(5, 3)))
    assert out.shape == (1, 3)
    assert grad_check(loss_fn, ps, h=1e-5) < 1e-6


# -- warping ----------------------------------------------------------------------


def test_warp2d_matches_field_warp():
    rng = np.random.default_rng(4)
    g = Grid((12, 11))
    img = rng.standard_normal(g.shape)
    flow = 1.3 * rng.standard_normal((2,) + g.shape) + 0.1  # off-lattice
    got = nnops.warp2d(Tensor(img[None, None]), Tensor(flow[None])).data[0, 0]
    phi = DisplacementField(g, np.moveaxis(flow, 0, -1))
    want = warp_image(ScalarField(g, img), phi).values
    assert np.allclose(got, want, atol=1e-12)


def test_warp2d_shape_validation():
    with pytest.raises(ShapeError):
        nnops.warp2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 3, 4, 4))))
    with pytest.raises(ShapeError):
        nnops.warp2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 2, 5, 4))))


def test_warp2d_flow_grad_saturates_outside():
    img = np.arange(16.0).reshape(1, 1, 4, 4)
    flow = np.full((1, 2, 4, 4), 10.0)  # samples beyond the far corner
    t = Tensor(flow, requires_grad=True)
    reduce_sum(nnops.warp2d(Tensor(img), t)).backward()
    assert np.array_equal(t.grad, np.zeros_like(flow))


def test_warp2d_grad_check_interior():
    rng = np.random.default_rng(5)
    ps = ParamStore()
    ps.add("img", rng.standard_normal((1, 1, 6, 6)))
    # keep sample points interior and off-lattice so bilinear weights are smooth
    ps.add("flow", 0.8 * rng.uniform(0.1, 0.9, size=(1, 2, 6, 6)))

    def loss_fn(p):
        return reduce_sum(nnops.warp2d(p["img"], p["flow"]) ** 2.0)

    assert grad_check(loss_fn, ps, h=1e-6, max_coords=48, seed=1) < 1e-5


# -- windowed and stencil ops ------------------------------------------------------


def test_box_sum2d_matches_analysis_and_is_self_adjoint():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((2, 3, 7, 8))
    got = nnops.box_sum2d(Tensor(x), (3, 5)).data
    assert np.allclose(got, box_sum(x, (1, 1, 3, 5)), atol=1e-12)

    y = rng.standard_normal(x.shape)
    lhs = float((got * y).sum())
    xt = Tensor(x, requires_grad=True)
    reduce_sum(nnops.box_sum2d(xt, (3, 5)) * y).backward()
    # <Bx, y> = <x, By> and the vjp is B applied to the upstream grad
    assert lhs == pytest.approx(float((x * box_sum(y, (1, 1, 3, 5))).sum()), rel=1e-12)
    assert np.allclose(xt.grad, box_sum(y, (1, 1, 3, 5)), atol=1e-12)


def test_apply_axis_matrix_adjoint_is_transpose():
    rng = np.random.default_rng(7)
    mat = rng.standard_normal((6, 6))
    x = Tensor(rng.standard_normal((2, 6, 4)), requires_grad=True)
    k = rng.standard_normal((2, 6, 4))
    reduce_sum(nnops.apply_axis_matrix(x, mat, 1) * k).backward()
    want = np.einsum("ji,bjk->bik", mat, k)
    assert np.allclose(x.grad, want, atol=1e-12)


# -- loss heads --------------------------------------------------------------------


def test_ncc_squared_matches_analysis():
    rng = np.random.default_rng(8)
    g = Grid((24, 24))
    a = rng.standard_normal(g.shape)
    b = a + 0.3 * rng.standard_normal(g.shape)
    got = float(nnops.ncc_squared(Tensor(a[None, None]), Tensor(b[None, None])).data)
    want = ncc(ScalarField(g, a), ScalarField(g, b))
    assert got == pytest.approx(want, abs=1e-12)


def test_ncc_squared_batch_is_mean_over_items():
    rng = np.random.default_rng(9)
    a = rng.standard_normal((2, 1, 16, 16))
    b = rng.standard_normal((2, 1, 16, 16))
    both = float(nnops.ncc_squared(Tensor(a), Tensor(b)).data)
    singles = [float(nnops.ncc_squared(Tensor(a[i:i + 1]), Tensor(b[i:i + 1])).data)
               for i in range(2)]
    assert both == pytest.approx(np.mean(singles), abs=1e-12)


def test_ncc_squared_shape_guard():
    with pytest.raises(ShapeError):
        nnops.ncc_squared(Tensor(np.zeros((1, 1, 8, 8))), Tensor(np.zeros((1, 1, 9, 8))))


def test_bending_penalty_matches_analysis():
    rng = np.random.default_rng(10)
    g = Grid((10, 9), (0.8, 1.2))
    u = rng.standard_normal(g.shape + (2,))
    phi = DisplacementField(g, u)
    flow = np.moveaxis(u, -1, 0)[None]
    got = float(nnops.bending_penalty(Tensor(flow), spacing=g.spacing).data)
    assert got == pytest.approx(bending_energy(phi), abs=1e-12)
    with pytest.raises(ShapeError):
        nnops.bending_penalty(Tensor(np.zeros((1, 3, 8, 8))))


def test_loss_head_grad_checks():
    rng = np.random.default_rng(11)
    ps = ParamStore()
    ps.add("a", rng.standard_normal((1, 1, 10, 10)))
    ps.add("flow", 0.5 * rng.standard_normal((1, 2, 8, 8)))
    fixed = rng.standard_normal((1, 1, 10, 10))

    def ncc_loss(p):
        return 1.0 - nnops.ncc_squared(p["a"], fixed, window=5)

    def bend_loss(p):
        return nnops.bending_penalty(p["flow"])

    assert grad_check(ncc_loss, ps, names=["a"], h=1e-5, max_coords=24) < 1e-5
    assert grad_check(bend_loss, ps, names=["flow"], h=1e-5, max_coords=24) < 1e-6
