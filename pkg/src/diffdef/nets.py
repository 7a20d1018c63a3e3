"""Network definitions: autoencoder, denoiser, registration net.

Parameters live in a ParamStore under dotted prefixes ("ae.", "dn.", "reg.").
Forward functions accept either a ParamStore (trainable, builds a graph) or
the dict from ParamStore.frozen() (constants, no graph), so the same code
serves training and frozen evaluation.

Initialization is fan-in-scaled uniform (bound sqrt(3/fan_in)), biases zero.
Output heads use a reduced scale so freshly built networks predict small
fields.
"""

from __future__ import annotations

import numpy as np

from . import nnops
from .engine import clip, concat, relu, reshape
from .errors import ShapeError

# channel widths, sized for 64^2 images on a single CPU core
ENC_CH = (12, 24, 24, 48)
DEC_CH = (48, 48, 24, 24, 12, 12)
DN_CH = 48
DN_BLOCKS = 4
REG_CH = (8, 16, 32)
EMB_WIDTH = 72
# the field head pairs a large fixed gain with a proportionally small weight
# init: the initial field is tiny, but each unit of (per-parameter normalized)
# weight travel moves the output gain times further, so the head can reach
# data-scale displacement amplitudes within a modest step budget
FIELD_GAIN_INIT = 10.0
FIELD_HEAD_SCALE = 0.05
HEAD_SCALE = 0.5


def init_conv(ps, name, cin, cout, rng, k=3, scale=1.0):
    bound = scale * np.sqrt(3.0 / (cin * k * k))
    ps.add(name + ".w", rng.uniform(-bound, bound, size=(cout, cin, k, k)))
    ps.add(name + ".b", np.zeros(cout))


def init_dense(ps, name, fin, fout, rng, scale=1.0):
    bound = scale * np.sqrt(3.0 / fin)
    ps.add(name + ".w", rng.uniform(-bound, bound, size=(fin, fout)))
    ps.add(name + ".b", np.zeros(fout))


def _conv(P, name, x, stride=1):
    return nnops.conv2d(x, P[name + ".w"], P[name + ".b"], stride=stride)


# -- autoencoder ---------------------------------------------------------------


def build_autoencoder(ps, rng, z_channels=4, field_channels=2):
    c0, c1, c2, c3 = ENC_CH
    init_conv(ps, "ae.enc.c0", 1, c0, rng)
    init_conv(ps, "ae.enc.c1", c0, c1, rng)
    init_conv(ps, "ae.enc.c2", c1, c2, rng)
    init_conv(ps, "ae.enc.c3", c2, c3, rng)
    init_conv(ps, "ae.enc.c4", c3, 2 * z_channels, rng)
    d0, d1, d2, d3, d4, d5 = DEC_CH
    init_conv(ps, "ae.dec.c0", z_channels, d0, rng)
    init_conv(ps, "ae.dec.c1", d0, d1, rng)
    init_conv(ps, "ae.dec.c2", d1, d2, rng)
    init_conv(ps, "ae.dec.c3", d2, d3, rng)
    init_conv(ps, "ae.dec.c4", d3, d4, rng)
    init_conv(ps, "ae.dec.c5", d4, d5, rng)
    init_conv(ps, "ae.dec.img", d5, 1, rng, scale=HEAD_SCALE)
    init_conv(ps, "ae.dec.field", d5, field_channels, rng, scale=FIELD_HEAD_SCALE)
    ps.add("ae.dec.gain", np.array(FIELD_GAIN_INIT))
    return ps


def encoder_forward(P, x, z_channels=4):
    """(B, 1, H, W) -> mean, logvar with spatial size H/4, W/4."""
    h = relu(_conv(P, "ae.enc.c0", x))
    h = relu(_conv(P, "ae.enc.c1", h, stride=2))
    h = relu(_conv(P, "ae.enc.c2", h))
    h = relu(_conv(P, "ae.enc.c3", h, stride=2))
    h = _conv(P, "ae.enc.c4", h)
    mean = h[:, :z_channels]
    logvar = clip(h[:, z_channels:], -30.0, 20.0)
    return mean, logvar


def decoder_trunk(P, z):
    h = relu(_conv(P, "ae.dec.c0", z))
    h = relu(_conv(P, "ae.dec.c1", h))
    h = relu(_conv(P, "ae.dec.c2", nnops.upsample2(h)))
    h = relu(_conv(P, "ae.dec.c3", h))
    h = relu(_conv(P, "ae.dec.c4", nnops.upsample2(h)))
    h = relu(_conv(P, "ae.dec.c5", h))
    return h


def decode_image_tensor(P, z):
    return _conv(P, "ae.dec.img", decoder_trunk(P, z))


def decode_field_tensor(P, z):
    return _conv(P, "ae.dec.field", decoder_trunk(P, z)) * P["ae.dec.gain"]


DECODER_TRAIN_PREFIXES = ("ae.dec.c", "ae.dec.field", "ae.dec.gain")


# -- diffusion denoiser --------------------------------------------------------


def build_denoiser(ps, rng, z_channels=4, width=DN_CH, emb_width=EMB_WIDTH):
    init_conv(ps, "dn.in", z_channels, width, rng)
    for k in range(DN_BLOCKS):
        init_dense(ps, f"dn.b{k}.emb", emb_width, width, rng)
        init_conv(ps, f"dn.b{k}.c0", width, width, rng)
        init_conv(ps, f"dn.b{k}.c1", width, width, rng)
    init_conv(ps, "dn.out", width, z_channels, rng, scale=HEAD_SCALE)
    return ps


def denoiser_forward(P, z, emb):
    """Predict the noise in z. emb: (B, EMB_WIDTH) conditioning vector."""
    h = _conv(P, "dn.in", z)
    width = h.shape[1]
    for k in range(DN_BLOCKS):
        e = nnops.dense(emb, P[f"dn.b{k}.emb.w"], P[f"dn.b{k}.emb.b"])
        t = h + reshape(e, (e.shape[0], width, 1, 1))
        t = relu(_conv(P, f"dn.b{k}.c0", t))
        t = _conv(P, f"dn.b{k}.c1", t)
        h = h + t
    return _conv(P, "dn.out", relu(h))


# -- registration network ------------------------------------------------------


def build_regnet(ps, rng, field_channels=2):
    c0, c1, c2 = REG_CH
    init_conv(ps, "reg.e0", 2, c0, rng)
    init_conv(ps, "reg.e1", c0, c1, rng)
    init_conv(ps, "reg.e2", c1, c2, rng)
    init_conv(ps, "reg.m", c2, c2, rng)
    init_conv(ps, "reg.d1", c2, c1, rng)
    init_conv(ps, "reg.d1s", 2 * c1, c1, rng)
    init_conv(ps, "reg.d0", c1, c0, rng)
    init_conv(ps, "reg.d0s", 2 * c0, c0, rng)
    init_conv(ps, "reg.head", c0, field_channels, rng, scale=0.1)
    return ps


def regnet_forward(P, pair):
    """(B, 2, H, W) fixed/moving stack -> (B, 2, H, W) displacement field."""
    if pair.shape[2] % 4 or pair.shape[3] % 4:
        raise ShapeError("regnet needs spatial sizes divisible by 4")
    e0 = relu(_conv(P, "reg.e0", pair))
    e1 = relu(_conv(P, "reg.e1", e0, stride=2))
    e2 = relu(_conv(P, "reg.e2", e1, stride=2))
    m = relu(_conv(P, "reg.m", e2))
    d1 = relu(_conv(P, "reg.d1", nnops.upsample2(m)))
    d1 = relu(_conv(P, "reg.d1s", concat([d1, e1], axis=1)))
    d0 = relu(_conv(P, "reg.d0", nnops.upsample2(d1)))
    d0 = relu(_conv(P, "reg.d0s", concat([d0, e0], axis=1)))
    return _conv(P, "reg.head", d0)
