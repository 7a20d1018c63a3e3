import numpy as np
import pytest

from diffdef import engine
from diffdef.engine import (AdamState, ParamStore, Tensor, adam_step, clip,
                            concat, forward_backward, grad_check, log, relu,
                            sigmoid)
from diffdef.errors import ArgumentError, NumericError, ShapeError


# -- forward/backward basics -----------------------------------------------------


def test_square_value_and_grad():
    w = Tensor(np.array(3.0), requires_grad=True)
    loss = w * w
    loss.backward()
    assert loss.item() == 9.0
    assert w.grad == pytest.approx(6.0)


def test_matmul_grads():
    a = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    b = Tensor(np.ones((3, 4)), requires_grad=True)
    loss = (a @ b).sum()
    loss.backward()
    # d/da sum(a@b) = ones @ b.T, d/db = a.T @ ones
    assert np.allclose(a.grad, np.ones((2, 4)) @ b.data.T)
    assert np.allclose(b.grad, a.data.T @ np.ones((2, 4)))


def test_broadcast_add_unbroadcasts_grad():
    a = Tensor(np.zeros((4, 3)), requires_grad=True)
    b = Tensor(np.zeros(3), requires_grad=True)
    (a + b).sum().backward()
    assert a.grad.shape == (4, 3)
    assert np.array_equal(b.grad, np.full(3, 4.0))


def test_relu_dead_region_gets_zero_grad():
    x = Tensor(np.array([-2.0, -0.0, 1.5]), requires_grad=True)
    relu(x).sum().backward()
    assert np.array_equal(x.grad, [0.0, 0.0, 1.0])


def test_clip_zero_grad_outside_range():
    x = Tensor(np.array([-2.0, 0.5, 3.0]), requires_grad=True)
    clip(x, -1.0, 1.0).sum().backward()
    assert np.array_equal(x.grad, [0.0, 1.0, 0.0])


def test_sigmoid_matches_closed_form_grad():
    x = Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
    sigmoid(x).sum().backward()
    s = 1.0 / (1.0 + np.exp(-x.data))
    assert np.allclose(x.grad, s * (1 - s), atol=1e-12)


def test_slice_and_concat_roundtrip_grads():
    x = Tensor(np.arange(10.0), requires_grad=True)
    y = concat([x[:4], x[4:]], axis=0)
    (y * np.arange(10.0)).sum().backward()
    assert np.array_equal(x.grad, np.arange(10.0))


def test_reused_node_accumulates_grad():
    w = Tensor(np.array(2.0), requires_grad=True)
    y = w * w + w * w  # w appears in two branches
    y.backward()
    assert w.grad == pytest.approx(8.0)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        (x * 2.0).backward()


def test_mean_and_keepdims():
    x = Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
    m = x.mean(axis=1, keepdims=True)
    assert m.shape == (3, 1)
    m.sum().backward()
    assert np.allclose(x.grad, 0.25)


# -- param store -----------------------------------------------------------------


def test_param_store_basics():
    ps = ParamStore()
    ps.add("w", np.ones((2, 2)))
    ps.add("b", np.zeros(2))
    assert "w" in ps and len(ps) == 2
    assert ps.num_params() == 6
    assert ps.names() == ["w", "b"]
    with pytest.raises(ArgumentError):
        ps.add("w", np.zeros(1))


def test_state_dict_roundtrip_and_validation():
    ps = ParamStore()
    ps.add("enc.w", np.arange(4.0))
    state = ps.state_dict()
    state["enc.w"][:] = 7.0
    ps.load_state(state)
    assert np.array_equal(ps["enc.w"].data, np.full(4, 7.0))
    with pytest.raises(ArgumentError):
        ps.load_state({})
    with pytest.raises(ShapeError):
        ps.load_state({"enc.w": np.zeros((2, 3))})


def test_subset_prefix():
    ps = ParamStore()
    ps.add("ae.dec.c0.w", np.zeros(1))
    ps.add("ae.enc.c0.w", np.zeros(1))
    ps.add("dn.b0.w", np.zeros(1))
    assert ps.subset("ae.dec.") == ["ae.dec.c0.w"]
    assert ps.subset("dn.") == ["dn.b0.w"]


def test_forward_backward_contract():
    ps = ParamStore()
    ps.add("w", np.array([1.0, 2.0]))

    def loss_fn(p):
        return (p["w"] * p["w"]).sum()

    val = forward_backward(loss_fn, ps)
    assert val == pytest.approx(5.0)
    assert np.allclose(ps["w"].grad, [2.0, 4.0])
    # runs are deterministic and grads are overwritten, not accumulated
    forward_backward(loss_fn, ps)
    assert np.allclose(ps["w"].grad, [2.0, 4.0])

    with pytest.raises(ArgumentError):
        forward_backward(lambda p: 3.0, ps)


def test_forward_backward_rejects_nonfinite():
    ps = ParamStore()
    ps.add("w", np.array(0.0))
    with np.errstate(divide="ignore"):
        with pytest.raises(NumericError):
            forward_backward(lambda p: log(p["w"]), ps)  # log(0) = -inf


# -- adam ------------------------------------------------------------------------


def test_adam_first_step_size():
    ps = ParamStore()
    ps.add("w", np.array(1.0))
    st = AdamState(lr=0.1)
    forward_backward(lambda p: p["w"] * p["w"], ps)
    adam_step(ps, st)
    # bias correction makes the first update lr * g / (|g| + eps)
    assert float(ps["w"].data) == pytest.approx(0.9, abs=1e-6)


def test_adam_matches_reference_recurrence():
    ps = ParamStore()
    ps.add("w", np.array(0.7))
    st = AdamState(lr=0.05)

    w_ref, m, v = 0.7, 0.0, 0.0
    for t in range(1, 11):
        forward_backward(lambda p: (p["w"] + 2.0) * (p["w"] + 2.0), ps)
        adam_step(ps, st)
        g = 2.0 * (w_ref + 2.0)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mh = m / (1 - 0.9 ** t)
        vh = v / (1 - 0.999 ** t)
        w_ref -= 0.05 * mh / (np.sqrt(vh) + 1e-8)
    assert float(ps["w"].data) == pytest.approx(w_ref, abs=1e-10)


def test_adam_names_subset_only_updates_listed():
    ps = ParamStore()
    ps.add("a", np.array(1.0))
    ps.add("b", np.array(1.0))
    st = AdamState(lr=0.1)
    forward_backward(lambda p: p["a"] * p["a"] + p["b"] * p["b"], ps)
    adam_step(ps, st, names=["a"])
    assert float(ps["a"].data) != 1.0
    assert float(ps["b"].data) == 1.0


def test_adam_rejects_bad_lr():
    with pytest.raises(ArgumentError):
        AdamState(lr=0.0)


# -- finite-difference checking ---------------------------------------------------


def test_grad_check_accepts_correct_grads():
    # points stay away from w = -1 where the gradient of w*exp(w) vanishes
    # and the relative-error floor would dominate
    ps = ParamStore()
    ps.add("w", np.linspace(-0.5, 1.0, 5))

    def loss_fn(p):
        return (engine.exp(p["w"]) * p["w"]).sum()

    assert grad_check(loss_fn, ps, h=1e-5) < 1e-6


def test_grad_check_flags_wrong_grads():
    ps = ParamStore()
    ps.add("w", np.array([0.5, -0.3]))

    calls = {"n": 0}

    def loss_fn(p):
        calls["n"] += 1
        t = p["w"]
        out = (t * t).sum()
        if calls["n"] == 1:
            # poison the backward pass only on the differentiated call
            real = out._vjp
            out._vjp = lambda g: tuple(2.0 * gg if gg is not None else None
                                       for gg in real(g))
        return out

    assert grad_check(loss_fn, ps) > 0.3


def test_grad_check_names_filter():
    ps = ParamStore()
    ps.add("good", np.array(0.3))
    ps.add("alsogood", np.array(-0.8))

    def loss_fn(p):
        return p["good"] * p["good"] + sigmoid(p["alsogood"])

    assert grad_check(loss_fn, ps, names=["good"], h=1e-5) < 1e-8
