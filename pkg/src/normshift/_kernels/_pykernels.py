"""Pure numpy implementations of the hot convolution/pooling kernels.

These are the reference fallback for the compiled ``_ckernels`` module and
share its exact signatures. Column layout for ``im2col`` is
``(C*kh*kw, N*OH*OW)`` with rows ordered (channel, ki, kj) and columns
ordered (sample, out_row, out_col).
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    oh = _out_size(h, kh, stride, pad)
    ow = _out_size(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((c, kh, kw, n, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
            cols[:, i, j] = patch.transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * oh * ow)


def col2im(cols, n, c, h, w, kh, kw, stride, pad):
    oh = _out_size(h, kh, stride, pad)
    ow = _out_size(w, kw, stride, pad)
    cols = cols.reshape(c, kh, kw, n, oh, ow)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                cols[:, i, j].transpose(1, 0, 2, 3)
    if pad:
        return np.ascontiguousarray(xp[:, :, pad:pad + h, pad:pad + w])
    return xp


def maxpool_forward(x, k, stride):
    """Return (pooled, argidx); argidx is the row-major offset inside each window."""
    n, c, h, w = x.shape
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win[:, :, :oh, :ow].reshape(n, c, oh, ow, k * k)
    # np.argmax returns the first maximal entry, which is the tie-break we want
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg.astype(np.int64)


def maxpool_backward(grad, argidx, h, w, k, stride):
    n, c, oh, ow = grad.shape
    dx = np.zeros((n, c, h, w), dtype=grad.dtype)
    for t in range(k * k):
        di, dj = divmod(t, k)
        hit = np.where(argidx == t, grad, 0)
        dx[:, :, di:di + stride * oh:stride, dj:dj + stride * ow:stride] += hit
    return dx


def affine_forward(x, mu, scale, gamma=None, beta=None):
    """((x - mu) / scale) * gamma + beta over (N, C, HW) with (N, C) statistics."""
    out = (x - mu[:, :, None]) / scale[:, :, None]
    if gamma is not None:
        out = out * gamma[:, :, None]
    if beta is not None:
        out = out + beta[:, :, None]
    return out


def affine_backward(g, x, mu, scale, gamma=None, need_gx=True):
    """Return (grad_x or None, sum of g, sum of g * xhat); sums are float64 of shape (N, C)."""
    xhat = (x - mu[:, :, None]) / scale[:, :, None]
    sum_g = g.sum(axis=2, dtype=np.float64)
    sum_gxhat = (g * xhat).sum(axis=2, dtype=np.float64)
    gx = None
    if need_gx:
        gx = (g * gamma[:, :, None] if gamma is not None else g) / scale[:, :, None]
    return gx, sum_g, sum_gxhat
