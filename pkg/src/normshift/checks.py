"""Finite-difference gradient suite covering every differentiable layer.

Each case builds a small float64 problem from a seed and reduces the layer
output with fixed random weights, so no output direction is left unchecked
(a plain sum would have zero gradient through any standardization).
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .norms import ASRState, NormConfig, channel_stats, init_norm
from .numcore import ops
from .numcore.gradcheck import grad_check, param_grad_check
from .numcore.tensor import Param, Tensor

F64 = np.float64
DEFAULT_THRESHOLD = 1e-5
# central differences straddling a ReLU kink are meaningless; check points
# are redrawn until every internal pre-activation is at least this far from 0
KINK_MARGIN = 1e-2


def _case(forward: Callable[[Tensor], Tensor], x0: np.ndarray, params: list[Param], rng) -> float:
    """Max error over the input gradient and every parameter gradient."""
    probe = forward(Tensor(x0))
    w = rng.standard_normal(probe.shape)

    def loss_of(x):
        return ops.sum(ops.mul(forward(x), w))

    err = grad_check(loss_of, x0)
    if params:
        x_fixed = Tensor(x0)
        errs = param_grad_check(lambda: loss_of(x_fixed), params, rng=rng)
        err = max(err, max(errs.values()))
    return err


def _param(name, rng, shape, scale=0.5):
    return Param(name, rng.standard_normal(shape) * scale, dtype=F64)


def _distinct(rng, shape):
    """Values spaced 0.1 apart so max-pooling has no near ties."""
    n = int(np.prod(shape))
    return (rng.permutation(n).reshape(shape) * 0.1 - n * 0.05).astype(F64)


def _relu_margin(state, x0: np.ndarray) -> float:
    """Smallest |pre-activation| of any ReLU inside an ASR layer at ``x0``."""
    if not isinstance(state, ASRState):
        return np.inf
    st = channel_stats(Tensor(x0))
    pre = []
    if state.adaptive_stan:
        h_mu, h_sigma = state.stan_enc(st.mu), state.stan_enc(st.sigma)
        pre += [h_mu, h_sigma, state.sigma_dec(ops.relu(h_sigma))]
    if state.adaptive_rescale:
        pre += [state.rescale_enc(st.mu), state.rescale_enc(st.sigma)]
    return min(float(np.min(np.abs(t.data))) for t in pre)


def _norm_case(kind: str, seed: int, **cfg) -> float:
    rng = np.random.default_rng([seed, 7])
    c = 4
    config = NormConfig(kind=kind, groups=2, **cfg)
    for _ in range(100):
        state = init_norm(kind, c, config, rng=rng, dtype=F64)
        # move every parameter off its initial value: zero biases behind a
        # dead encoder would otherwise put ReLU kinks exactly on the point
        for p in state.params():
            p.data = np.asarray(p.data + rng.standard_normal(p.shape) * 0.3)
            p.zero_grad()
        x0 = rng.standard_normal((3, c, 3, 3)) * 1.5 + rng.standard_normal((1, c, 1, 1))
        if _relu_margin(state, x0) > KINK_MARGIN:
            break
    return _case(lambda x: state.forward(x, "train"), x0, state.params(), rng)


def _conv(seed: int) -> float:
    rng = np.random.default_rng([seed, 1])
    w = _param("w", rng, (4, 3, 3, 3))
    b = _param("b", rng, (4,))
    x0 = rng.standard_normal((2, 3, 5, 5))
    e1 = _case(lambda x: ops.conv2d(x, w, b, stride=1, pad=1), x0, [w, b], rng)
    e2 = _case(lambda x: ops.conv2d(x, w, b, stride=2, pad=0), x0, [w, b], rng)
    return max(e1, e2)


def _fc(seed: int) -> float:
    rng = np.random.default_rng([seed, 2])
    w = _param("w", rng, (4, 5))
    b = _param("b", rng, (4,))
    return _case(lambda x: ops.fully_connected(x, w, b), rng.standard_normal((3, 5)), [w, b], rng)


def _pool(seed: int) -> float:
    rng = np.random.default_rng([seed, 3])
    return _case(lambda x: ops.maxpool2d(x, 2), _distinct(rng, (2, 2, 4, 4)), [], rng)


def _relu(seed: int) -> float:
    rng = np.random.default_rng([seed, 4])
    x0 = rng.choice([-1.0, 1.0], size=(3, 7)) * rng.uniform(0.1, 1.0, size=(3, 7))
    return _case(ops.relu, x0, [], rng)


def _cross_entropy(seed: int) -> float:
    rng = np.random.default_rng([seed, 5])
    labels = rng.integers(0, 5, size=4)
    x0 = rng.standard_normal((4, 5)) * 2

    def loss_of(x):
        return ops.softmax_cross_entropy(x, labels)[0]

    return grad_check(loss_of, x0)


LAYER_CASES: dict[str, Callable[[int], float]] = {
    "conv": _conv,
    "fc": _fc,
    "pool": _pool,
    "relu": _relu,
    "cross_entropy": _cross_entropy,
    "bn": lambda s: _norm_case("bn", s),
    "gn": lambda s: _norm_case("gn", s),
    "in": lambda s: _norm_case("in", s),
    "ln": lambda s: _norm_case("ln", s),
    "sn": lambda s: _norm_case("sn", s),
    "sn_with_bn": lambda s: _norm_case("sn", s, include_bn=True),
    "as": lambda s: _norm_case("as", s),
    "ar": lambda s: _norm_case("ar", s),
    "asr": lambda s: _norm_case("asr", s),
    "asr_pretrain": lambda s: _norm_case("asr", s, pretrain_variant=True),
}


def gradient_suite(seeds=range(5), layers=None) -> dict[str, float]:
    """Max relative gradient error per layer over ``seeds``."""
    names = list(LAYER_CASES) if layers is None else list(layers)
    unknown = [n for n in names if n not in LAYER_CASES]
    if unknown:
        raise ValueError(f"unknown layers {unknown}; available: {list(LAYER_CASES)}")
    return {name: max(LAYER_CASES[name](s) for s in seeds) for name in names}
