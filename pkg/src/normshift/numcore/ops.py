"""Differentiable primitives.

Every function accepts :class:`Tensor` objects (or array-likes/scalars that
are treated as constants) and returns a new Tensor. The backward rule is a
closure returning one gradient per input, ``None`` where no gradient is
needed.
"""

from __future__ import annotations

import numpy as np

from .. import _kernels
from .tensor import Tensor, active_tape


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def _data(x):
    if isinstance(x, Tensor):
        return x.data
    return x


def _needs(x) -> bool:
    return isinstance(x, Tensor) and x.requires_grad


def _result(data, inputs: tuple, vjp) -> Tensor:
    out = Tensor(np.asarray(data))
    tape = active_tape()
    if tape is not None and any(_needs(i) for i in inputs):
        out.requires_grad = True
        tape.record(out, inputs, vjp)
    return out


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    nlead = g.ndim - len(shape)
    if nlead > 0:
        g = g.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _shape(x):
    return np.shape(_data(x))


# ----------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    sa, sb = _shape(a), _shape(b)

    def vjp(g):
        return (unbroadcast(g, sa) if _needs(a) else None,
                unbroadcast(g, sb) if _needs(b) else None)

    return _result(_data(a) + _data(b), (a, b), vjp)


def sub(a, b) -> Tensor:
    sa, sb = _shape(a), _shape(b)

    def vjp(g):
        return (unbroadcast(g, sa) if _needs(a) else None,
                unbroadcast(-g, sb) if _needs(b) else None)

    return _result(_data(a) - _data(b), (a, b), vjp)


def mul(a, b) -> Tensor:
    da, db = _data(a), _data(b)
    sa, sb = np.shape(da), np.shape(db)

    def vjp(g):
        return (unbroadcast(g * db, sa) if _needs(a) else None,
                unbroadcast(g * da, sb) if _needs(b) else None)

    return _result(da * db, (a, b), vjp)


def div(a, b) -> Tensor:
    da, db = _data(a), _data(b)
    sa, sb = np.shape(da), np.shape(db)
    out = da / db

    def vjp(g):
        ga = unbroadcast(g / db, sa) if _needs(a) else None
        gb = unbroadcast(-g * out / db, sb) if _needs(b) else None
        return ga, gb

    return _result(out, (a, b), vjp)


def square(x) -> Tensor:
    d = _data(x)

    def vjp(g):
        return (2 * g * d,)

    return _result(d * d, (x,), vjp)


def sqrt(x) -> Tensor:
    """Square root whose derivative at 0 is taken as 0 instead of +inf."""
    d = _data(x)
    out = np.sqrt(d)

    def vjp(g):
        safe = np.where(out > 0, out, 1)
        return (np.where(out > 0, g / (2 * safe), 0).astype(out.dtype, copy=False),)

    return _result(out, (x,), vjp)


def exp(x) -> Tensor:
    out = np.exp(_data(x))
    return _result(out, (x,), lambda g: (g * out,))


def relu(x) -> Tensor:
    d = _data(x)
    out = np.maximum(d, 0).astype(d.dtype, copy=False)

    def vjp(g):
        return (g * (out > 0),)

    return _result(out, (x,), vjp)


def _sigmoid(d):
    e = np.exp(-np.abs(d))
    return np.where(d >= 0, 1 / (1 + e), e / (1 + e)).astype(np.result_type(d, np.float32), copy=False)


def sigmoid(x) -> Tensor:
    out = _sigmoid(_data(x))

    def vjp(g):
        return (g * out * (1 - out),)

    return _result(out, (x,), vjp)


def tanh(x) -> Tensor:
    out = np.tanh(_data(x))

    def vjp(g):
        return (g * (1 - out * out),)

    return _result(out, (x,), vjp)


# ----------------------------------------------------------------------------
# reductions and shape manipulation


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    d = _data(x)
    axes = _norm_axes(axis, d.ndim)
    out = d.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, d.shape).copy(),)

    return _result(out, (x,), vjp)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    d = _data(x)
    axes = _norm_axes(axis, d.ndim)
    count = int(np.prod([d.shape[a] for a in axes])) if axes else 1
    if count == 0:
        raise ShapeError("mean over an empty extent")
    out = d.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, d.shape).copy(),)

    return _result(out, (x,), vjp)


def reshape(x, shape) -> Tensor:
    d = _data(x)
    orig = d.shape
    return _result(d.reshape(shape), (x,), lambda g: (g.reshape(orig),))


def getitem(x, index) -> Tensor:
    d = _data(x)

    def vjp(g):
        full = np.zeros_like(d)
        np.add.at(full, index, g)
        return (full,)

    return _result(d[index], (x,), vjp)


def concat(xs, axis: int = 0) -> Tensor:
    datas = [_data(x) for x in xs]
    sizes = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def vjp(g):
        parts = np.split(g, sizes, axis=axis)
        return tuple(p if _needs(x) else None for p, x in zip(parts, xs))

    return _result(np.concatenate(datas, axis=axis), tuple(xs), vjp)


# ----------------------------------------------------------------------------
# network layers


def fully_connected(x, weight, bias=None) -> Tensor:
    """y = x @ weight.T + bias for x of shape (N, D_in) and weight (D_out, D_in)."""
    dx, dw = _data(x), _data(weight)
    if dx.ndim != 2 or dw.ndim != 2:
        raise ShapeError(f"fully_connected expects 2-D input and weight, got {dx.shape} and {dw.shape}")
    if dx.shape[1] != dw.shape[1]:
        raise ShapeError(f"inner dimensions disagree: input {dx.shape} vs weight {dw.shape}")
    out = dx @ dw.T
    if bias is not None:
        db = _data(bias)
        if db.shape != (dw.shape[0],):
            raise ShapeError(f"bias shape {db.shape} does not match output width {dw.shape[0]}")
        out = out + db

    def vjp(g):
        gx = g @ dw if _needs(x) else None
        gw = g.T @ dx if _needs(weight) else None
        gb = g.sum(axis=0) if _needs(bias) else None
        return gx, gw, gb

    return _result(out, (x, weight, bias), vjp)


def conv2d(x, weight, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of (N, C_in, H, W) input with (C_out, C_in, kh, kw) kernels."""
    dx, dw = _data(x), _data(weight)
    if dx.ndim != 4:
        raise ShapeError(f"conv2d input must be (N,C,H,W), got shape {dx.shape}")
    if dw.ndim != 4:
        raise ShapeError(f"conv2d weight must be (C_out,C_in,kh,kw), got shape {dw.shape}")
    n, c, h, w = dx.shape
    c_out, c_in, kh, kw = dw.shape
    if c_in != c:
        raise ShapeError(f"kernel expects {c_in} input channels, input has {c}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"invalid stride={stride} / pad={pad}")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    if bias is not None and _data(bias).shape != (c_out,):
        raise ShapeError(f"bias shape {_data(bias).shape} does not match C_out={c_out}")
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1

    xc = np.ascontiguousarray(dx)
    cols = _kernels.im2col(xc, kh, kw, stride, pad)
    w2 = dw.reshape(c_out, -1)
    y = w2 @ cols
    if bias is not None:
        db = _data(bias)[:, None]
        if np.result_type(y, db) == y.dtype:
            y += db
        else:
            y = y + db
    out = np.ascontiguousarray(y.reshape(c_out, n, oh, ow).transpose(1, 0, 2, 3))

    def vjp(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(c_out, -1)
        gx = gw = gb = None
        if _needs(x):
            gcols = np.ascontiguousarray(w2.T @ g2)
            gx = _kernels.col2im(gcols, n, c, h, w, kh, kw, stride, pad)
        if _needs(weight):
            gw = (g2 @ cols.T).reshape(dw.shape)
        if _needs(bias):
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    return _result(out, (x, weight, bias), vjp)


def maxpool2d(x, k: int, stride: int | None = None) -> Tensor:
    """Max pooling; the gradient goes to the first maximal element of each window."""
    if stride is None:
        stride = k
    if k <= 0 or stride <= 0:
        raise ShapeError(f"pool size and stride must be positive, got k={k}, stride={stride}")
    dx = _data(x)
    if dx.ndim != 4:
        raise ShapeError(f"maxpool2d input must be (N,C,H,W), got shape {dx.shape}")
    h, w = dx.shape[2:]
    if k > h or k > w:
        raise ShapeError(f"pool size {k} exceeds spatial dims {h}x{w}")
    out, arg = _kernels.maxpool_forward(np.ascontiguousarray(dx), k, stride)

    def vjp(g):
        return (_kernels.maxpool_backward(np.ascontiguousarray(g), arg, h, w, k, stride),)

    return _result(out, (x,), vjp)


# ----------------------------------------------------------------------------
# fused normalization steps; same arithmetic as the elementwise chains, one
# tape node each so backward makes fewer full-size passes


def channel_std(x) -> Tensor:
    """Population std over the spatial axes of (N, C, H, W), shape (N, C).

    The derivative where the std is 0 is taken as 0, as in :func:`sqrt`.
    """
    d = _data(x)
    if d.ndim != 4:
        raise ShapeError(f"channel_std input must be (N,C,H,W), got shape {d.shape}")
    centered = d - d.mean(axis=(2, 3), keepdims=True)
    out = np.sqrt((centered * centered).mean(axis=(2, 3)))

    def vjp(g):
        count = d.shape[2] * d.shape[3]
        scale = np.where(out > 0, g / (count * np.where(out > 0, out, 1)), 0).astype(d.dtype, copy=False)
        return (centered * scale[:, :, None, None],)

    return _result(out, (x,), vjp)


def _per_sample_channel(v, n: int, c: int, dtype) -> np.ndarray:
    return np.ascontiguousarray(np.broadcast_to(np.asarray(v, dtype=dtype), (n, c, 1, 1)).reshape(n, c))


def channel_affine(x, mu, scale, gamma=None, beta=None) -> Tensor:
    """((x - mu) / scale) * gamma + beta with broadcast statistics; gamma/beta optional.

    The statistics must broadcast to (N, C, 1, 1).
    """
    d = _data(x)
    if d.ndim != 4:
        raise ShapeError(f"channel_affine input must be (N,C,H,W), got shape {d.shape}")
    stats = [v for v in (mu, scale, gamma, beta) if v is not None]
    dtype = np.result_type(d, *[_data(v) for v in stats])
    n, c, h, w = d.shape
    try:
        nc = [None if v is None else _per_sample_channel(_data(v), n, c, dtype) for v in (mu, scale, gamma, beta)]
    except ValueError:
        raise ShapeError(f"statistics do not broadcast to ({n}, {c}, 1, 1)") from None
    xf = np.ascontiguousarray(d, dtype=dtype).reshape(n, c, h * w)
    out = _kernels.affine_forward(xf, *nc).reshape(d.shape)

    def vjp(g):
        gf = np.ascontiguousarray(g, dtype=dtype).reshape(n, c, h * w)
        gx, sum_g, sum_gxhat = _kernels.affine_backward(gf, xf, nc[0], nc[1], nc[2], _needs(x))
        gam = 1.0 if nc[2] is None else nc[2]

        def back(v, shape):
            return unbroadcast(v.astype(dtype, copy=False).reshape(n, c, 1, 1), shape)

        return (
            gx.reshape(d.shape) if _needs(x) else None,
            back(-gam * sum_g / nc[1], _shape(mu)) if _needs(mu) else None,
            back(-gam * sum_gxhat / nc[1], _shape(scale)) if _needs(scale) else None,
            back(sum_gxhat, _shape(gamma)) if _needs(gamma) else None,
            back(sum_g, _shape(beta)) if _needs(beta) else None,
        )

    return _result(out, (x, mu, scale, gamma, beta), vjp)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels, reduction: str = "mean"):
    """Return (loss, probs): mean (or summed) -log p(y|x) and the softmax rows."""
    d = _data(logits)
    labels = np.asarray(labels)
    if d.ndim != 2:
        raise ShapeError(f"logits must be (N,K), got {d.shape}")
    n, k = d.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch size {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    labels = labels.astype(np.int64)
    z = d - d.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    per_sample = lse - z[rows, labels]
    probs = np.exp(z - lse[:, None])
    scale = 1.0 / n if reduction == "mean" else 1.0
    loss = per_sample.sum() * scale

    def vjp(g):
        grad = probs.copy()
        grad[rows, labels] -= 1
        return (grad * (g * scale),)

    return _result(np.asarray(loss, dtype=d.dtype), (logits,), vjp), probs
