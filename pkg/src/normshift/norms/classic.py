"""Batch, group (instance/layer) and switchable normalization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numcore import ops
from ..numcore.ops import ShapeError
from ..numcore.tensor import Param, Tensor
from .stats import EPS, channel_stats, standardize_rescale


def _shape4(x):
    d = x.data if isinstance(x, Tensor) else np.asarray(x)
    if d.ndim != 4:
        raise ShapeError(f"expected (N,C,H,W) input, got {d.shape}")
    return d.shape


def _batch_stats(x):
    """Per-channel mean/std over (N, H, W), each of shape (C,)."""
    mu = ops.mean(x, axis=(0, 2, 3), keepdims=True)
    var = ops.mean(ops.square(ops.sub(x, mu)), axis=(0, 2, 3))
    c = mu.shape[1]
    return ops.reshape(mu, (c,)), var


def _ema(running: np.ndarray, batch: np.ndarray, momentum: float) -> np.ndarray:
    return (momentum * running + (1 - momentum) * batch).astype(running.dtype)


@dataclass
class BNState:
    gamma: Param
    beta: Param
    running_mu: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = EPS
    # bn_test layers use test-batch statistics in eval mode
    test_batch_stats: bool = False

    def params(self) -> list[Param]:
        return [self.gamma, self.beta]

    def buffers(self) -> dict[str, np.ndarray]:
        return {"running_mu": self.running_mu, "running_var": self.running_var}

    def forward(self, x, mode: str = "train") -> Tensor:
        if mode == "eval" and self.test_batch_stats:
            return bn_test_forward(x, self)
        return bn_forward(x, self, mode)


def bn_forward(x, state: BNState, mode: str = "train") -> Tensor:
    n, c, _, _ = _shape4(x)
    if mode == "train":
        if n < 2:
            raise ValueError("batch norm in train mode needs a batch of at least 2 samples")
        mu, var = _batch_stats(x)
        state.running_mu[...] = _ema(state.running_mu, mu.data, state.momentum)
        state.running_var[...] = _ema(state.running_var, var.data, state.momentum)
        return standardize_rescale(x, mu, ops.sqrt(var), state.gamma, state.beta, state.eps)
    if mode == "eval":
        sigma = np.sqrt(state.running_var).astype(state.running_var.dtype)
        return standardize_rescale(x, state.running_mu, sigma, state.gamma, state.beta, state.eps)
    raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")


def bn_test_forward(x, state: BNState) -> Tensor:
    """Standardize with the statistics of the evaluation batch itself; no EMA update."""
    n, _, _, _ = _shape4(x)
    if n < 2:
        raise ValueError("test-batch normalization needs a batch of at least 2 samples")
    mu, var = _batch_stats(x)
    return standardize_rescale(x, mu, ops.sqrt(var), state.gamma, state.beta, state.eps)


@dataclass(frozen=True)
class GroupSpec:
    groups: int

    def __post_init__(self):
        if self.groups < 1:
            raise ValueError("group count must be positive")


@dataclass
class GroupState:
    spec: GroupSpec
    gamma: Param
    beta: Param
    eps: float = EPS

    def params(self) -> list[Param]:
        return [self.gamma, self.beta]

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, x, mode: str = "train") -> Tensor:
        return group_forward(x, self.spec, self.gamma, self.beta, self.eps)


def group_forward(x, spec: GroupSpec, gamma, beta, eps: float = EPS) -> Tensor:
    """Per-sample standardization over (C/G, H, W) blocks; G=C is IN, G=1 is LN."""
    n, c, h, w = _shape4(x)
    g = spec.groups
    if c % g:
        raise ShapeError(f"{g} groups do not divide {c} channels")
    if g == c:
        st = channel_stats(x)
        return standardize_rescale(x, st.mu, st.sigma, gamma, beta, eps)
    xg = ops.reshape(x, (n, g, (c // g) * h * w))
    mu = ops.mean(xg, axis=2, keepdims=True)
    diff = ops.sub(xg, mu)
    sigma = ops.sqrt(ops.mean(ops.square(diff), axis=2, keepdims=True))
    xs = ops.reshape(ops.div(diff, ops.add(sigma, eps)), (n, c, h, w))
    return ops.add(ops.mul(xs, ops.reshape(gamma, (1, c, 1, 1))), ops.reshape(beta, (1, c, 1, 1)))


SN_CONSTITUENTS = ("bn", "in", "ln")


@dataclass
class SNState:
    mean_logits: Param  # (3,) over (bn, in, ln), combine channel means
    std_logits: Param  # (3,), combine channel stds
    gamma: Param
    beta: Param
    running_mu: np.ndarray
    running_var: np.ndarray
    include_bn: bool = False
    active: tuple = (True, True, True)
    momentum: float = 0.9
    eps: float = EPS

    def params(self) -> list[Param]:
        return [self.mean_logits, self.std_logits, self.gamma, self.beta]

    def buffers(self) -> dict[str, np.ndarray]:
        return {"running_mu": self.running_mu, "running_var": self.running_var}

    def mask(self) -> np.ndarray:
        m = np.array(self.active, dtype=bool)
        if not self.include_bn:
            m[0] = False
        return m

    def weights(self) -> tuple[np.ndarray, np.ndarray]:
        m = self.mask()
        return (masked_softmax(self.mean_logits, m).data, masked_softmax(self.std_logits, m).data)

    def forward(self, x, mode: str = "train") -> Tensor:
        return sn_forward(x, self, self.include_bn, mode)


def masked_softmax(logits, mask: np.ndarray) -> Tensor:
    """Softmax restricted to ``mask``; masked entries get weight exactly 0."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("all switchable-norm constituents are masked")
    d = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    # masked entries are shifted to exactly 0 so exp() cannot overflow there
    shift = np.where(mask, d[mask].max(), d).astype(d.dtype)
    e = ops.mul(ops.exp(ops.sub(logits, shift)), mask.astype(d.dtype))
    return ops.div(e, ops.sum(e))


def sn_forward(x, state: SNState, include_bn: bool | None = None, mode: str = "train") -> Tensor:
    """Standardize by softmax-weighted BN/IN/LN statistics, then rescale."""
    n, c, h, w = _shape4(x)
    if include_bn is None:
        include_bn = state.include_bn
    m = np.array(state.active, dtype=bool)
    if not include_bn:
        m[0] = False
    wm = masked_softmax(state.mean_logits, m)
    ws = masked_softmax(state.std_logits, m)

    st = channel_stats(x)
    mus, sigmas, idx = [], [], []
    if m[0]:
        if mode == "train":
            if n < 2:
                raise ValueError("switchable norm with a BN constituent needs batches of at least 2")
            bmu, bvar = _batch_stats(x)
            state.running_mu[...] = _ema(state.running_mu, bmu.data, state.momentum)
            state.running_var[...] = _ema(state.running_var, bvar.data, state.momentum)
            bsig = ops.sqrt(bvar)
        elif mode == "eval":
            bmu = Tensor(state.running_mu)
            bsig = Tensor(np.sqrt(state.running_var).astype(state.running_var.dtype))
        else:
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        mus.append(ops.reshape(bmu, (1, c)))
        sigmas.append(ops.reshape(bsig, (1, c)))
        idx.append(0)
    if m[1]:
        mus.append(st.mu)
        sigmas.append(st.sigma)
        idx.append(1)
    if m[2]:
        xl = ops.reshape(x, (n, c * h * w))
        lmu = ops.mean(xl, axis=1, keepdims=True)
        lsig = ops.sqrt(ops.mean(ops.square(ops.sub(xl, lmu)), axis=1, keepdims=True))
        mus.append(lmu)
        sigmas.append(lsig)
        idx.append(2)

    mu_stan = None
    sigma_stan = None
    for i, mu_i, sig_i in zip(idx, mus, sigmas):
        tm = ops.mul(ops.getitem(wm, i), mu_i)
        ts = ops.mul(ops.getitem(ws, i), sig_i)
        mu_stan = tm if mu_stan is None else ops.add(mu_stan, tm)
        sigma_stan = ts if sigma_stan is None else ops.add(sigma_stan, ts)
    # LN-only or BN-only combinations broadcast to (N, C)
    zeros = np.zeros((n, c), dtype=x.data.dtype if isinstance(x, Tensor) else np.float64)
    mu_stan = ops.add(mu_stan, zeros)
    sigma_stan = ops.add(sigma_stan, zeros)
    return standardize_rescale(x, mu_stan, sigma_stan, state.gamma, state.beta, state.eps)
