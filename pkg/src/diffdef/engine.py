"""Micro reverse-mode automatic differentiation over numpy arrays.

Small tape-based engine: a Tensor wraps an ndarray, ops record a vector-Jacobian
closure, ``backward`` walks the tape in reverse topological order. Float64 is
the default dtype; float32 inputs are kept as-is. Only what the networks in
this package need is implemented.
"""

from __future__ import annotations

import numpy as np

from .errors import ArgumentError, NumericError, ShapeError

_FLOATS = (np.float32, np.float64)


def _as_array(x):
    a = np.asarray(x)
    if a.dtype not in _FLOATS:
        a = a.astype(np.float64)
    return a


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    def item(self):
        return float(self.data)

    def backward(self):
        if self.data.size != 1:
            raise ShapeError("backward() expects a scalar loss")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._vjp is None:
                continue
            grads = node._vjp(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += g

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __rtruediv__(self, other):
        return mul(power(self, -1.0), other)

    def __pow__(self, k):
        return power(self, k)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take_slice(self, key)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def astensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, vjp):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(g, shape):
    """Sum a gradient down to the shape it was broadcast from."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def add(a, b):
    a, b = astensor(a), astensor(b)
    data = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(data, (a, b), vjp)


def mul(a, b):
    a, b = astensor(a), astensor(b)
    data = a.data * b.data

    def vjp(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), vjp)


def power(a, k):
    a = astensor(a)
    if isinstance(k, Tensor):
        raise ArgumentError("power supports scalar exponents only")
    data = a.data ** k

    def vjp(g):
        return (g * k * a.data ** (k - 1),)

    return _make(data, (a,), vjp)


def matmul(a, b):
    a, b = astensor(a), astensor(b)
    data = a.data @ b.data

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _reduce_matmul(ga, a.data.shape), _reduce_matmul(gb, b.data.shape)

    return _make(data, (a, b), vjp)


def _reduce_matmul(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax in range(g.ndim - 2):
        if shape[ax] == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def exp(a):
    a = astensor(a)
    data = np.exp(a.data)

    def vjp(g):
        return (g * data,)

    return _make(data, (a,), vjp)


def log(a):
    a = astensor(a)
    data = np.log(a.data)

    def vjp(g):
        return (g / a.data,)

    return _make(data, (a,), vjp)


def relu(a):
    a = astensor(a)
    mask = a.data > 0
    data = np.where(mask, a.data, 0.0)

    def vjp(g):
        return (g * mask,)

    return _make(data, (a,), vjp)


def sigmoid(a):
    a = astensor(a)
    x = a.data
    data = np.empty_like(x)
    pos = x >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    data[~pos] = ex / (1.0 + ex)

    def vjp(g):
        return (g * data * (1.0 - data),)

    return _make(data, (a,), vjp)


def absolute(a):
    a = astensor(a)
    data = np.abs(a.data)

    def vjp(g):
        return (g * np.sign(a.data),)

    return _make(data, (a,), vjp)


def clip(a, lo, hi):
    """Clamp with zero gradient outside [lo, hi]."""
    a = astensor(a)
    data = np.clip(a.data, lo, hi)
    mask = (a.data >= lo) & (a.data <= hi)

    def vjp(g):
        return (g * mask,)

    return _make(data, (a,), vjp)


def reduce_sum(a, axis=None, keepdims=False):
    a = astensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _make(data, (a,), vjp)


def reduce_mean(a, axis=None, keepdims=False):
    a = astensor(a)
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(reduce_sum(a, axis, keepdims), 1.0 / float(n))


def reshape(a, shape):
    a = astensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    data = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.data.shape),)

    return _make(data, (a,), vjp)


def transpose(a, axes):
    a = astensor(a)
    data = a.data.transpose(axes)
    inv = np.argsort(axes)

    def vjp(g):
        return (g.transpose(inv),)

    return _make(data, (a,), vjp)


def take_slice(a, key):
    a = astensor(a)
    data = a.data[key]

    def vjp(g):
        out = np.zeros_like(a.data)
        out[key] = g
        return (out,)

    return _make(data, (a,), vjp)


def concat(tensors, axis=0):
    tensors = [astensor(t) for t in tensors]
    if not tensors:
        raise ArgumentError("concat needs at least one tensor")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, tuple(tensors), vjp)


def broadcast_to(a, shape):
    a = astensor(a)
    data = np.broadcast_to(a.data, shape).copy()

    def vjp(g):
        return (_unbroadcast(g, a.data.shape),)

    return _make(data, (a,), vjp)


# -- parameters and optimization ---------------------------------------------


class ParamStore:
    """Ordered map of named trainable tensors with paired gradients."""

    def __init__(self):
        self._entries = {}
        self.meta = {}

    def add(self, name, array):
        if name in self._entries:
            raise ArgumentError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(array, dtype=np.float64), requires_grad=True)
        self._entries[name] = t
        return t

    def __getitem__(self, name):
        return self._entries[name]

    def __contains__(self, name):
        return name in self._entries

    def __len__(self):
        return len(self._entries)

    def names(self):
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def zero_grads(self):
        for t in self._entries.values():
            t.grad = np.zeros_like(t.data)

    def num_params(self):
        return sum(t.data.size for t in self._entries.values())

    def state_dict(self):
        return {name: t.data.copy() for name, t in self._entries.items()}

    def load_state(self, state):
        for name, t in self._entries.items():
            if name not in state:
                raise ArgumentError(f"missing parameter {name!r} in state")
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ShapeError(f"parameter {name!r}: shape {arr.shape} != {t.data.shape}")
            t.data = arr.copy()
            t.grad = None

    def frozen(self):
        """Plain arrays for no-graph forward passes through frozen networks."""
        return {name: t.data for name, t in self._entries.items()}

    def subset(self, prefix):
        """Names under a dotted prefix, e.g. all decoder entries."""
        return [n for n in self._entries if n.startswith(prefix)]


def forward_backward(loss_fn, params, *args, **kwargs):
    """Run a loss closure and leave fresh gradients in the store.

    Gradients overwrite whatever the store held before (zeroed first). Returns
    the scalar loss value. Non-finite losses or gradients raise NumericError.
    """
    params.zero_grads()
    loss = loss_fn(params, *args, **kwargs)
    if not isinstance(loss, Tensor):
        raise ArgumentError("loss_fn must return a Tensor")
    loss.backward()
    value = float(loss.data)
    if not np.isfinite(value):
        raise NumericError("loss is not finite")
    for name, t in params.items():
        if t.grad is not None and not np.isfinite(t.grad).all():
            raise NumericError(f"gradient of {name!r} is not finite")
    return value


class AdamState:
    """First/second moment accumulators plus hyperparameters."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ArgumentError("lr must be positive")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {}
        self.v = {}


def adam_step(params, state, names=None):
    """One Adam update in place. ``names`` restricts the updated subset."""
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        if names is not None and name not in names:
            continue
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
        v = state.v.get(name)
        if v is None:
            v = state.v[name] = np.zeros_like(p.data)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data = p.data - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def grad_check(loss_fn, params, args=(), names=None, h=1e-4, max_coords=64, seed=0):
    """Compare reverse-mode gradients against central finite differences.

    Returns the maximum relative error over sampled coordinates. The relative
    error uses max(|a|, |fd|, 1e-6) in the denominator so noise on near-zero
    gradients does not dominate.
    """
    value = forward_backward(loss_fn, params, *args)
    if not np.isfinite(value):
        raise NumericError("loss is not finite")
    analytic = {name: t.grad.copy() for name, t in params.items()}
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, t in params.items():
        if names is not None and name not in names:
            continue
        flat = t.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= max_coords else rng.choice(n, max_coords, replace=False)
        ga = analytic[name].reshape(-1)
        for c in coords:
            keep = flat[c]
            step = h * max(1.0, abs(keep))
            flat[c] = keep + step
            up = float(loss_fn(params, *args).data)
            flat[c] = keep - step
            down = float(loss_fn(params, *args).data)
            flat[c] = keep
            fd = (up - down) / (2.0 * step)
            err = abs(ga[c] - fd) / max(abs(ga[c]), abs(fd), 1e-6)
            worst = max(worst, err)
    return worst
