"""Array-level network ops for the autodiff engine.

All image tensors are (batch, channels, H, W), float64. Convolutions use
k=3 'same' padding with stride 1 or 2; upsampling is nearest-neighbour x2.
The warp here mirrors fields.warp_image (pull-back, clamp borders) but is
differentiable with respect to the flow and, when needed, the image.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import analysis
from .engine import _make, astensor, clip, matmul
from .errors import ArgumentError, ShapeError


def _im2col(x, kh, kw, stride, pad):
    """(B, C, H, W) -> (B, Ho*Wo, C*kh*kw) patch matrix."""
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    b, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b, ho * wo, c * kh * kw)
    return cols, ho, wo


def conv2d(x, w, b=None, stride=1, pad=1):
    """2D convolution (cross-correlation). w: (Cout, Cin, kh, kw)."""
    x, w = astensor(x), astensor(w)
    if b is not None:
        b = astensor(b)
    if stride not in (1, 2):
        raise ArgumentError("stride must be 1 or 2")
    xb, wd = x.data, w.data
    cout, cin, kh, kw = wd.shape
    if xb.ndim != 4 or xb.shape[1] != cin:
        raise ShapeError(f"input {xb.shape} does not match kernel {wd.shape}")
    cols, ho, wo = _im2col(xb, kh, kw, stride, pad)
    wm = wd.reshape(cout, -1).T
    out = cols @ wm
    if b is not None:
        out = out + b.data
    out = out.transpose(0, 2, 1).reshape(xb.shape[0], cout, ho, wo)
    # keep the patch matrix only when the weight gradient will need it
    cols_saved = cols if w.requires_grad else None

    def vjp(g):
        gm = g.transpose(0, 2, 3, 1).reshape(xb.shape[0], ho * wo, cout)
        gw = gb = gx = None
        if w.requires_grad:
            gw = np.tensordot(gm, cols_saved, axes=([0, 1], [0, 1])).reshape(wd.shape)
        if b is not None and b.requires_grad:
            gb = gm.sum(axis=(0, 1))
        if x.requires_grad:
            if stride == 1 and ho == xb.shape[2] and wo == xb.shape[3]:
                # input grad of a same-size correlation is a correlation with
                # the spatially flipped, channel-transposed kernel
                wt = wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
                gc, _, _ = _im2col(g, kh, kw, 1, pad)
                gx = (gc @ wt.reshape(cin, -1).T).transpose(0, 2, 1)
                gx = gx.reshape(xb.shape)
            else:
                gcols = (gm @ wm.T).reshape(xb.shape[0], ho, wo, cin, kh, kw)
                gcols = gcols.transpose(0, 3, 1, 2, 4, 5)
                hp, wp = xb.shape[2] + 2 * pad, xb.shape[3] + 2 * pad
                gxp = np.zeros((xb.shape[0], cin, hp, wp))
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + (ho - 1) * stride + 1:stride,
                            j:j + (wo - 1) * stride + 1:stride] += gcols[:, :, :, :, i, j]
                gx = gxp[:, :, pad:pad + xb.shape[2], pad:pad + xb.shape[3]]
        if b is not None:
            return gx, gw, gb
        return gx, gw

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, vjp)


def upsample2(x):
    """Nearest-neighbour x2 upsampling of (B, C, H, W)."""
    x = astensor(x)
    data = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def vjp(g):
        b, c, h2, w2 = g.shape
        return (g.reshape(b, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)),)

    return _make(data, (x,), vjp)


def dense(x, w, b=None):
    """Affine layer on (B, F) input."""
    out = matmul(x, w)
    if b is not None:
        out = out + b
    return out


def warp2d(image, flow):
    """Differentiable pull-back warp with clamped borders.

    image: (B, C, H, W); flow: (B, 2, H, W), channel 0 along H. Points are
    clamped to the grid before bilinear weights are formed, so gradients
    saturate to zero outside, consistent with the clamped forward value.
    """
    image, flow = astensor(image), astensor(flow)
    img, fl = image.data, flow.data
    if img.ndim != 4 or fl.ndim != 4 or fl.shape[1] != 2:
        raise ShapeError("warp2d expects (B,C,H,W) image and (B,2,H,W) flow")
    if img.shape[0] != fl.shape[0] or img.shape[2:] != fl.shape[2:]:
        raise ShapeError(f"image {img.shape} and flow {fl.shape} do not line up")
    b, c, h, w = img.shape
    ii, jj = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    pi = np.clip(ii + fl[:, 0], 0.0, h - 1.0)
    pj = np.clip(jj + fl[:, 1], 0.0, w - 1.0)
    ins_i = (ii + fl[:, 0] > 0.0) & (ii + fl[:, 0] < h - 1.0)
    ins_j = (jj + fl[:, 1] > 0.0) & (jj + fl[:, 1] < w - 1.0)
    i0 = np.minimum(np.floor(pi), h - 2).astype(np.int64)
    j0 = np.minimum(np.floor(pj), w - 2).astype(np.int64)
    fi = pi - i0
    fj = pj - j0
    bidx = np.arange(b)[:, None, None, None]
    cidx = np.arange(c)[None, :, None, None]
    v00 = img[bidx, cidx, i0[:, None], j0[:, None]]
    v01 = img[bidx, cidx, i0[:, None], j0[:, None] + 1]
    v10 = img[bidx, cidx, i0[:, None] + 1, j0[:, None]]
    v11 = img[bidx, cidx, i0[:, None] + 1, j0[:, None] + 1]
    wfi, wfj = fi[:, None], fj[:, None]
    out = ((1 - wfi) * ((1 - wfj) * v00 + wfj * v01)
           + wfi * ((1 - wfj) * v10 + wfj * v11))

    def vjp(g):
        gflow = gimg = None
        if flow.requires_grad:
            di = ((1 - wfj) * (v10 - v00) + wfj * (v11 - v01)) * g
            dj = ((1 - wfi) * (v01 - v00) + wfi * (v11 - v10)) * g
            gflow = np.stack([di.sum(axis=1) * ins_i, dj.sum(axis=1) * ins_j], axis=1)
        if image.requires_grad:
            gimg = np.zeros_like(img)
            np.add.at(gimg, (bidx, cidx, i0[:, None], j0[:, None]), (1 - wfi) * (1 - wfj) * g)
            np.add.at(gimg, (bidx, cidx, i0[:, None], j0[:, None] + 1), (1 - wfi) * wfj * g)
            np.add.at(gimg, (bidx, cidx, i0[:, None] + 1, j0[:, None]), wfi * (1 - wfj) * g)
            np.add.at(gimg, (bidx, cidx, i0[:, None] + 1, j0[:, None] + 1), wfi * wfj * g)
        return gimg, gflow

    return _make(out, (image, flow), vjp)


def box_sum2d(x, window):
    """Sliding-window sum over the two spatial axes, zero padded (self-adjoint)."""
    x = astensor(x)
    if np.isscalar(window):
        window = (int(window), int(window))
    win4 = (1, 1) + tuple(window)
    data = analysis.box_sum(x.data, win4)

    def vjp(g):
        return (analysis.box_sum(g, win4),)

    return _make(data, (x,), vjp)


def apply_axis_matrix(x, mat, axis):
    """Apply a dense (n, n) matrix along one axis; adjoint applies the transpose."""
    x = astensor(x)
    data = analysis.apply_along(mat, x.data, axis)
    mt = mat.T.copy()

    def vjp(g):
        return (analysis.apply_along(mt, g, axis),)

    return _make(data, (x,), vjp)


# -- differentiable training losses -------------------------------------------


def ncc_squared(a, b, window=9, eps=analysis.NCC_EPS):
    """Differentiable mean squared windowed ZNCC of (B, 1, H, W) tensors.

    Mirrors analysis.ncc: windows where the first image is near constant are
    excluded from the mean. The mask depends only on the first argument, so
    it stays fixed while the second (the warped image) is optimized and the
    loss remains continuous in the flow.
    """
    a, b = astensor(a), astensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError("ncc inputs must share a shape")
    win = (int(window), int(window)) if np.isscalar(window) else tuple(window)
    m = analysis.box_sum(np.ones(a.data.shape), (1, 1) + win)
    sa, sb = box_sum2d(a, win), box_sum2d(b, win)
    saa, sbb = box_sum2d(a * a, win), box_sum2d(b * b, win)
    sab = box_sum2d(a * b, win)
    cross = sab - sa * sb * (1.0 / m)
    va = saa - sa * sa * (1.0 / m)
    vb = sbb - sb * sb * (1.0 / m)
    valid = np.maximum(va.data, 0.0) > analysis.NCC_VAR_FLOOR * m
    weights = valid / max(float(valid.sum()), 1.0)
    num = cross * cross
    den = clip(va * vb, eps, np.inf)
    return ((num / den) * weights).sum()


def bending_penalty(flow, spacing=(1.0, 1.0)):
    """Differentiable version of analysis.bending_energy for (B, 2, H, W) flows."""
    flow = astensor(flow)
    _, d, h, w = flow.data.shape
    if d != 2:
        raise ShapeError("bending_penalty expects 2 flow channels")
    d1 = [analysis.d1_matrix(h, spacing[0]), analysis.d1_matrix(w, spacing[1])]
    d2 = [analysis.d2_matrix(h, spacing[0]), analysis.d2_matrix(w, spacing[1])]
    total = None
    for c in range(2):
        uc = flow[:, c] * spacing[c]
        t00 = apply_axis_matrix(uc, d2[0], 1) ** 2
        t11 = apply_axis_matrix(uc, d2[1], 2) ** 2
        t01 = apply_axis_matrix(apply_axis_matrix(uc, d1[0], 1), d1[1], 2) ** 2
        term = t00 + t11 + 2.0 * t01
        total = term if total is None else total + term
    # mean over voxels per batch item, then over the batch
    return total.mean()
