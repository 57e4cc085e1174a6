# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col/col2im, max-pool and per-channel affine kernels.

Signatures and accumulation order match ``_pykernels`` so both backends
produce the same numbers for non-overlapping pools and all conv shapes.
The affine backward sums accumulate in float64 and may differ from the
fallback in the last bits.
"""

import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.string cimport memcpy, memset

cnp.import_array()


cdef inline void _valid_range(Py_ssize_t size, Py_ssize_t osize, int stride, Py_ssize_t offset,
                              Py_ssize_t* lo, Py_ssize_t* hi) noexcept nogil:
    # output positions q with 0 <= q*stride + offset < size
    cdef Py_ssize_t a = 0, b = osize
    while a < osize and a * stride + offset < 0:
        a += 1
    while b > a and (b - 1) * stride + offset >= size:
        b -= 1
    lo[0] = a
    hi[0] = b


def im2col(floating[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((c * kh * kw, n * oh * ow), dtype=dtype)
    cdef floating[:, ::1] cols = out
    cdef Py_ssize_t ci, i, j, s, r, q, row, base, hi, off, r_lo, r_hi, q_lo, q_hi
    cdef floating* dst
    cdef const floating* src
    with nogil:
        for ci in range(c):
            for i in range(kh):
                _valid_range(h, oh, stride, i - pad, &r_lo, &r_hi)
                for j in range(kw):
                    _valid_range(w, ow, stride, j - pad, &q_lo, &q_hi)
                    off = j - pad
                    row = (ci * kh + i) * kw + j
                    for s in range(n):
                        for r in range(oh):
                            dst = &cols[row, (s * oh + r) * ow]
                            if r < r_lo or r >= r_hi or q_hi <= q_lo:
                                memset(dst, 0, ow * sizeof(floating))
                                continue
                            if q_lo > 0:
                                memset(dst, 0, q_lo * sizeof(floating))
                            if q_hi < ow:
                                memset(dst + q_hi, 0, (ow - q_hi) * sizeof(floating))
                            hi = r * stride + i - pad
                            src = &x[s, ci, hi, q_lo * stride + off]
                            if stride == 1:
                                memcpy(dst + q_lo, src, (q_hi - q_lo) * sizeof(floating))
                            else:
                                for q in range(q_hi - q_lo):
                                    dst[q_lo + q] = src[q * stride]
    return out


def col2im(floating[:, ::1] cols, int n, int c, int h, int w,
           int kh, int kw, int stride, int pad):
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((n, c, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = out
    cdef Py_ssize_t ci, i, j, s, r, q, row, base, hi, off, r_lo, r_hi, q_lo, q_hi
    cdef floating* dacc
    cdef floating* csrc
    with nogil:
        for ci in range(c):
            for i in range(kh):
                _valid_range(h, oh, stride, i - pad, &r_lo, &r_hi)
                for j in range(kw):
                    _valid_range(w, ow, stride, j - pad, &q_lo, &q_hi)
                    off = j - pad
                    row = (ci * kh + i) * kw + j
                    for s in range(n):
                        for r in range(r_lo, r_hi):
                            hi = r * stride + i - pad
                            base = (s * oh + r) * ow
                            dacc = &dx[s, ci, hi, q_lo * stride + off]
                            csrc = &cols[row, base + q_lo]
                            for q in range(q_hi - q_lo):
                                dacc[q * stride] += csrc[q]
    return out


def maxpool_forward(floating[:, :, :, ::1] x, int k, int stride):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h - k) // stride + 1
    cdef Py_ssize_t ow = (w - k) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((n, c, oh, ow), dtype=dtype)
    arg_arr = np.empty((n, c, oh, ow), dtype=np.int64)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef cnp.int64_t[:, :, :, ::1] arg = arg_arr
    cdef Py_ssize_t s, ci, r, q, di, dj, best_t
    cdef floating best, v
    with nogil:
        for s in range(n):
            for ci in range(c):
                for r in range(oh):
                    for q in range(ow):
                        best = x[s, ci, r * stride, q * stride]
                        best_t = 0
                        for di in range(k):
                            for dj in range(k):
                                v = x[s, ci, r * stride + di, q * stride + dj]
                                if v > best:
                                    best = v
                                    best_t = di * k + dj
                        out[s, ci, r, q] = best
                        arg[s, ci, r, q] = best_t
    return out_arr, arg_arr


def maxpool_backward(floating[:, :, :, ::1] grad, cnp.int64_t[:, :, :, ::1] argidx,
                     int h, int w, int k, int stride):
    cdef Py_ssize_t n = grad.shape[0], c = grad.shape[1]
    cdef Py_ssize_t oh = grad.shape[2], ow = grad.shape[3]
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((n, c, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = out
    cdef Py_ssize_t s, ci, r, q, t
    with nogil:
        for s in range(n):
            for ci in range(c):
                for r in range(oh):
                    for q in range(ow):
                        t = argidx[s, ci, r, q]
                        dx[s, ci, r * stride + t // k, q * stride + t % k] += grad[s, ci, r, q]
    return out


def _affine_forward(const floating[:, :, ::1] x, const floating[:, ::1] mu, const floating[:, ::1] scale,
                    const floating[:, ::1] gamma, const floating[:, ::1] beta, bint has_gamma, bint has_beta):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], hw = x.shape[2]
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((n, c, hw), dtype=dtype)
    cdef floating[:, :, ::1] out = out_arr
    cdef Py_ssize_t s, ci, p
    cdef floating m, sc, ga, be, v
    with nogil:
        for s in range(n):
            for ci in range(c):
                m = mu[s, ci]
                sc = scale[s, ci]
                if has_gamma:
                    ga = gamma[s, ci]
                if has_beta:
                    be = beta[s, ci]
                for p in range(hw):
                    v = (x[s, ci, p] - m) / sc
                    if has_gamma:
                        v = v * ga
                    if has_beta:
                        v = v + be
                    out[s, ci, p] = v
    return out_arr


def _affine_backward(const floating[:, :, ::1] g, const floating[:, :, ::1] x, const floating[:, ::1] mu,
                     const floating[:, ::1] scale, const floating[:, ::1] gamma, bint has_gamma, bint need_gx):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], hw = x.shape[2]
    dtype = np.float32 if floating is float else np.float64
    gx_arr = np.empty((n, c, hw), dtype=dtype) if need_gx else np.empty((1, 1, 1), dtype=dtype)
    sum_g_arr = np.empty((n, c), dtype=np.float64)
    sum_gxhat_arr = np.empty((n, c), dtype=np.float64)
    cdef floating[:, :, ::1] gx = gx_arr
    cdef double[:, ::1] sum_g = sum_g_arr
    cdef double[:, ::1] sum_gxhat = sum_gxhat_arr
    cdef Py_ssize_t s, ci, p
    cdef floating m, sc, ga, gv, xh
    cdef double a1, a2
    with nogil:
        for s in range(n):
            for ci in range(c):
                m = mu[s, ci]
                sc = scale[s, ci]
                if has_gamma:
                    ga = gamma[s, ci]
                a1 = 0.0
                a2 = 0.0
                for p in range(hw):
                    gv = g[s, ci, p]
                    xh = (x[s, ci, p] - m) / sc
                    a1 += gv
                    a2 += <double>(gv * xh)
                    if need_gx:
                        if has_gamma:
                            gx[s, ci, p] = (gv * ga) / sc
                        else:
                            gx[s, ci, p] = gv / sc
                sum_g[s, ci] = a1
                sum_gxhat[s, ci] = a2
    return (gx_arr if need_gx else None), sum_g_arr, sum_gxhat_arr


def affine_forward(x, mu, scale, gamma=None, beta=None):
    """((x - mu) / scale) * gamma + beta over (N, C, HW) with (N, C) statistics."""
    return _affine_forward(x, mu, scale, mu if gamma is None else gamma, mu if beta is None else beta,
                           gamma is not None, beta is not None)


def affine_backward(g, x, mu, scale, gamma=None, need_gx=True):
    """Return (grad_x or None, sum of g, sum of g * xhat); sums are float64 of shape (N, C)."""
    return _affine_backward(g, x, mu, scale, mu if gamma is None else gamma, gamma is not None, need_gx)
