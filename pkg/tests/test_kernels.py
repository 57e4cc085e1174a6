import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from normshift import _kernels
from normshift._kernels import _pykernels

backends = [_pykernels]
if _kernels.compiled_backend is not None:
    backends.append(_kernels.compiled_backend)


def direct_conv(x, w, stride, pad):
    """Quadruple-loop cross-correlation, the reference for im2col."""
    n, c, h, wd = x.shape
    co, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, co, oh, ow))
    for b in range(n):
        for o in range(co):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[b, o, i, j] = np.sum(patch * w[o])
    return out


def test_backend_selected():
    assert _kernels.BACKEND in ("cython", "python")


@pytest.mark.parametrize("mod", backends)
@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 0), (2, 1), (3, 2)])
def test_im2col_matches_direct_convolution(mod, stride, pad, rng):
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, 3, 2))
    cols = mod.im2col(x, 3, 2, stride, pad)
    oh = (7 + 2 * pad - 3) // stride + 1
    ow = (6 + 2 * pad - 2) // stride + 1
    out = (w.reshape(4, -1) @ cols).reshape(4, 2, oh, ow).transpose(1, 0, 2, 3)
    np.testing.assert_allclose(out, direct_conv(x, w, stride, pad), atol=1e-10)


@pytest.mark.parametrize("mod", backends)
@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 0), (2, 1)])
def test_col2im_is_adjoint_of_im2col(mod, stride, pad, rng):
    x = rng.standard_normal((2, 3, 6, 5))
    cols = mod.im2col(x, 3, 3, stride, pad)
    c = rng.standard_normal(cols.shape)
    lhs = np.sum(cols * c)
    rhs = np.sum(x * mod.col2im(c, 2, 3, 6, 5, 3, 3, stride, pad))
    assert lhs == pytest.approx(rhs, rel=1e-12)


@pytest.mark.skipif(_kernels.compiled_backend is None, reason="compiled kernels not built")
@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 3), c=st.integers(1, 4), h=st.integers(3, 9), w=st.integers(3, 9),
       k=st.integers(1, 3), stride=st.integers(1, 3), pad=st.integers(0, 2),
       dtype=st.sampled_from([np.float32, np.float64]), seed=st.integers(0, 2**31))
def test_compiled_matches_fallback_bitwise(n, c, h, w, k, stride, pad, dtype, seed):
    x = np.random.default_rng(seed).standard_normal((n, c, h, w)).astype(dtype)
    cy, py = _kernels.compiled_backend, _pykernels
    a, b = cy.im2col(x, k, k, stride, pad), py.im2col(x, k, k, stride, pad)
    assert a.dtype == b.dtype and np.array_equal(a, b)
    np.testing.assert_array_equal(cy.col2im(a, n, c, h, w, k, k, stride, pad),
                                  py.col2im(b, n, c, h, w, k, k, stride, pad))
    pk = min(k + 1, h, w)
    (oa, ia), (ob, ib) = cy.maxpool_forward(x, pk, pk), py.maxpool_forward(x, pk, pk)
    assert np.array_equal(oa, ob) and np.array_equal(ia, ib)
    g = np.ones_like(oa)
    np.testing.assert_array_equal(cy.maxpool_backward(g, ia, h, w, pk, pk),
                                  py.maxpool_backward(g, ib, h, w, pk, pk))


@pytest.mark.parametrize("mod", backends)
def test_maxpool_ties_pick_first_in_row_major_order(mod):
    x = np.ones((1, 1, 2, 2))
    out, idx = mod.maxpool_forward(x, 2, 2)
    assert out[0, 0, 0, 0] == 1.0 and idx.ravel()[0] == 0
    g = mod.maxpool_backward(np.ones_like(out), idx, 2, 2, 2, 2)
    np.testing.assert_array_equal(g[0, 0], [[1, 0], [0, 0]])


@pytest.mark.parametrize("mod", backends)
def test_affine_hand_example(mod):
    x = np.array([[[1.0, 3.0], [0.0, 4.0]]])  # (N=1, C=2, HW=2)
    mu, scale = np.array([[2.0, 2.0]]), np.array([[1.0, 2.0]])
    gamma, beta = np.array([[2.0, 1.0]]), np.array([[0.5, -1.0]])
    np.testing.assert_array_equal(mod.affine_forward(x, mu, scale, gamma, beta), [[[-1.5, 2.5], [-2.0, 0.0]]])
    np.testing.assert_array_equal(mod.affine_forward(x, mu, scale), [[[-1.0, 1.0], [-1.0, 1.0]]])
    gx, sum_g, sum_gxhat = mod.affine_backward(np.ones_like(x), x, mu, scale, gamma)
    np.testing.assert_array_equal(gx, [[[2.0, 2.0], [0.5, 0.5]]])
    np.testing.assert_array_equal(sum_g, [[2.0, 2.0]])
    np.testing.assert_array_equal(sum_gxhat, [[0.0, 0.0]])
    assert mod.affine_backward(np.ones_like(x), x, mu, scale, None, False)[0] is None


@pytest.mark.skipif(_kernels.compiled_backend is None, reason="compiled kernels not built")
@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 3), c=st.integers(1, 4), hw=st.integers(1, 40), affine=st.booleans(),
       dtype=st.sampled_from([np.float32, np.float64]), seed=st.integers(0, 2**31))
def test_compiled_affine_matches_fallback(n, c, hw, affine, dtype, seed):
    rng = np.random.default_rng(seed)
    x, g = (rng.standard_normal((n, c, hw)).astype(dtype) for _ in range(2))
    mu, beta, gamma = (rng.standard_normal((n, c)).astype(dtype) for _ in range(3))
    scale = rng.uniform(0.1, 2.0, (n, c)).astype(dtype)
    gamma, beta = (gamma, beta) if affine else (None, None)
    cy, py = _kernels.compiled_backend, _pykernels
    assert np.array_equal(cy.affine_forward(x, mu, scale, gamma, beta), py.affine_forward(x, mu, scale, gamma, beta))
    a, b = cy.affine_backward(g, x, mu, scale, gamma), py.affine_backward(g, x, mu, scale, gamma)
    assert np.array_equal(a[0], b[0])
    # the sums accumulate in float64 in a different order
    np.testing.assert_allclose(a[1], b[1], rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(a[2], b[2], rtol=1e-12, atol=1e-12)
