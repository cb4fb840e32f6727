"""Pure-numpy convolution kernels.

All arrays are channels-last with a single flattened batch axis:
``xpad`` is (N, Hp, Wp, C), already zero padded.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided


def im2col(xpad, kh, kw, stride, oh, ow):
    """Gather sliding patches into a contiguous (N, oh, ow, kh, kw, C) array."""
    n, _, _, c = xpad.shape
    sn, sh, sw, sc = xpad.strides
    view = as_strided(
        xpad,
        shape=(n, oh, ow, kh, kw, c),
        strides=(sn, sh * stride, sw * stride, sh, sw, sc),
        writeable=False,
    )
    return np.ascontiguousarray(view)


def col2im(dcols, hp, wp, stride):
    """Scatter-add patch gradients back onto the padded input grid."""
    n, oh, ow, kh, kw, c = dcols.shape
    out = np.zeros((n, hp, wp, c), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :] += dcols[:, :, :, i, j, :]
    return out


def dwconv_forward(xpad, w, stride, oh, ow):
    kh, kw, c = w.shape
    out = np.zeros((xpad.shape[0], oh, ow, c), dtype=xpad.dtype)
    for i in range(kh):
        for j in range(kw):
            out += xpad[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :] * w[i, j]
    return out


def dwconv_backward(xpad, w, dy, stride):
    """Return (d xpad, d w) for :func:`dwconv_forward`."""
    kh, kw, c = w.shape
    _, oh, ow, _ = dy.shape
    dx = np.zeros_like(xpad)
    dw = np.empty_like(w)
    for i in range(kh):
        for j in range(kw):
            sl = (slice(None), slice(i, i + stride * oh, stride), slice(j, j + stride * ow, stride))
            dx[sl] += dy * w[i, j]
            dw[i, j] = np.einsum("nhwc,nhwc->c", dy, xpad[sl])
    return dx, dw
