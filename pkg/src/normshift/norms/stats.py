"""Per-sample channel statistics and the two-step standardize/rescale map."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numcore import ops
from ..numcore.ops import ShapeError
from ..numcore.tensor import Tensor

EPS = 1e-5


@dataclass
class ChannelStats:
    """Per-sample channel mean and population std, each of shape (N, C)."""

    mu: Tensor
    sigma: Tensor


def channel_stats(x) -> ChannelStats:
    d = x.data if isinstance(x, Tensor) else np.asarray(x)
    if d.ndim != 4:
        raise ShapeError(f"expected (N,C,H,W) input, got {d.shape}")
    if d.shape[2] * d.shape[3] < 1:
        raise ShapeError("channel statistics need a non-empty spatial extent")
    return ChannelStats(ops.mean(x, axis=(2, 3)), ops.channel_std(x))


def as_4d(v) -> Tensor:
    """Lift a (C,) or (N, C) statistic to broadcast against (N, C, H, W)."""
    d = v.data if isinstance(v, Tensor) else np.asarray(v)
    if d.ndim == 1:
        return ops.reshape(v, (1, d.shape[0], 1, 1))
    if d.ndim == 2:
        return ops.reshape(v, (d.shape[0], d.shape[1], 1, 1))
    if d.ndim == 4:
        return v if isinstance(v, Tensor) else Tensor(d)
    raise ShapeError(f"statistic must be (C,) or (N,C), got {d.shape}")


def _check_channels(name, v, c):
    d = v.data if isinstance(v, Tensor) else np.asarray(v)
    if d.ndim in (1, 2) and d.shape[-1] != c:
        raise ShapeError(f"{name} has {d.shape[-1]} channels, input has {c}")


def _check_stan(x, mu_stan, sigma_stan) -> None:
    sd = sigma_stan.data if isinstance(sigma_stan, Tensor) else np.asarray(sigma_stan)
    if np.any(sd < 0):
        raise ValueError("sigma_stan must be non-negative")
    c = (x.data if isinstance(x, Tensor) else np.asarray(x)).shape[1]
    _check_channels("mu_stan", mu_stan, c)
    _check_channels("sigma_stan", sigma_stan, c)


def standardize(x, mu_stan, sigma_stan, eps: float = EPS) -> Tensor:
    _check_stan(x, mu_stan, sigma_stan)
    return ops.channel_affine(x, as_4d(mu_stan), ops.add(as_4d(sigma_stan), eps))


def rescale(x_stan, gamma, beta) -> Tensor:
    c = (x_stan.data if isinstance(x_stan, Tensor) else np.asarray(x_stan)).shape[1]
    _check_channels("gamma", gamma, c)
    _check_channels("beta", beta, c)
    return ops.add(ops.mul(x_stan, as_4d(gamma)), as_4d(beta))


def standardize_rescale(x, mu_stan, sigma_stan, gamma, beta, eps: float = EPS) -> Tensor:
    """((x - mu_stan) / (sigma_stan + eps)) * gamma + beta, per channel."""
    _check_stan(x, mu_stan, sigma_stan)
    c = (x.data if isinstance(x, Tensor) else np.asarray(x)).shape[1]
    _check_channels("gamma", gamma, c)
    _check_channels("beta", beta, c)
    return ops.channel_affine(x, as_4d(mu_stan), ops.add(as_4d(sigma_stan), eps), as_4d(gamma), as_4d(beta))
