"""Adaptive standardization and rescaling normalization.

Standardization statistics come from a bottleneck network applied to the
input's own channel mean/std, blended with the raw statistics through
sigmoid-bounded residual weights. Rescaling statistics come from a second
bottleneck network with tanh/sigmoid-bounded outputs plus learned biases.
Everything is computed per sample.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..numcore import ops
from ..numcore.ops import ShapeError
from ..numcore.tensor import Param, Tensor
from .stats import EPS, ChannelStats, as_4d, channel_stats, standardize, standardize_rescale


@dataclass
class Dense:
    weight: Param  # (out, in)
    bias: Param  # (out,)

    def __call__(self, x) -> Tensor:
        return ops.fully_connected(x, self.weight, self.bias)

    def params(self) -> list[Param]:
        return [self.weight, self.bias]

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]


@dataclass
class ASRState:
    """Parameters of one ASR layer.

    ``stan_enc`` is shared between the mean and std standardization paths and
    ``rescale_enc`` between the beta and gamma rescaling paths. When
    ``adaptive_stan`` is off the layer standardizes with plain instance
    statistics; when ``adaptive_rescale`` is off ``gamma_bias``/``beta_bias``
    act as an ordinary per-channel affine.
    """

    channels: int
    gamma_bias: Param
    beta_bias: Param
    stan_enc: Optional[Dense] = None
    mu_dec: Optional[Dense] = None
    sigma_dec: Optional[Dense] = None
    rho_mu: Optional[Param] = None
    rho_sigma: Optional[Param] = None
    rescale_enc: Optional[Dense] = None
    beta_dec: Optional[Dense] = None
    gamma_dec: Optional[Dense] = None
    rho_beta: Optional[Param] = None
    rho_gamma: Optional[Param] = None
    eps: float = EPS

    @property
    def adaptive_stan(self) -> bool:
        return self.stan_enc is not None

    @property
    def adaptive_rescale(self) -> bool:
        return self.rescale_enc is not None

    @property
    def pretrain_variant(self) -> bool:
        return self.rho_beta is not None

    @property
    def c_stan(self) -> int:
        return self.stan_enc.out_features if self.stan_enc else 0

    @property
    def c_rescale(self) -> int:
        return self.rescale_enc.out_features if self.rescale_enc else 0

    def params(self) -> list[Param]:
        out: list[Param] = []
        for dense in (self.stan_enc, self.mu_dec, self.sigma_dec):
            if dense is not None:
                out += dense.params()
        for p in (self.rho_mu, self.rho_sigma):
            if p is not None:
                out.append(p)
        for dense in (self.rescale_enc, self.beta_dec, self.gamma_dec):
            if dense is not None:
                out += dense.params()
        for p in (self.rho_beta, self.rho_gamma):
            if p is not None:
                out.append(p)
        out += [self.gamma_bias, self.beta_bias]
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def residual_weights(self) -> dict[str, float]:
        """sigmoid of every residual logit present in this layer."""
        lam = {}
        for key, p in (("lambda_mu", self.rho_mu), ("lambda_sigma", self.rho_sigma),
                       ("lambda_beta", self.rho_beta), ("lambda_gamma", self.rho_gamma)):
            if p is not None:
                lam[key] = float(ops._sigmoid(np.asarray(p.data, dtype=np.float64)))
        return lam

    def forward(self, x, mode: str = "train") -> Tensor:
        return asr_forward(x, self)


def learned_stats(stats: ChannelStats, state: ASRState) -> tuple[Tensor, Tensor]:
    """Blend of learned and raw statistics: (mu_stan, sigma_stan), each (N, C)."""
    mu, sigma = stats.mu, stats.sigma
    if not state.adaptive_stan:
        return mu, sigma
    mu_learned = state.mu_dec(ops.relu(state.stan_enc(mu)))
    sigma_learned = ops.relu(state.sigma_dec(ops.relu(state.stan_enc(sigma))))
    lam_mu = ops.sigmoid(state.rho_mu)
    lam_sigma = ops.sigmoid(state.rho_sigma)
    mu_stan = ops.add(ops.mul(lam_mu, mu_learned), ops.mul(ops.sub(1.0, lam_mu), mu))
    sigma_stan = ops.add(ops.mul(lam_sigma, sigma_learned), ops.mul(ops.sub(1.0, lam_sigma), sigma))
    return mu_stan, sigma_stan


def _check_state(x, state: ASRState):
    d = x.data if isinstance(x, Tensor) else np.asarray(x)
    if d.ndim != 4:
        raise ShapeError(f"expected (N,C,H,W) input, got {d.shape}")
    if d.shape[1] != state.channels:
        raise ShapeError(f"layer built for {state.channels} channels, input has {d.shape[1]}")


def as_forward(x, state: ASRState, stats: ChannelStats | None = None):
    """Adaptive standardization. Returns (x_stan, mu_stan, sigma_stan)."""
    _check_state(x, state)
    if stats is None:
        stats = channel_stats(x)
    mu_stan, sigma_stan = learned_stats(stats, state)
    return standardize(x, mu_stan, sigma_stan, state.eps), mu_stan, sigma_stan


def rescale_stats(mu, sigma, state: ASRState, pretrain_variant: bool | None = None):
    """(beta, gamma) from the raw channel statistics of the layer input."""
    if not state.adaptive_rescale:
        return state.beta_bias, state.gamma_bias
    if pretrain_variant is None:
        pretrain_variant = state.pretrain_variant
    if pretrain_variant and not state.pretrain_variant:
        raise ValueError("pretrain variant requested but the layer has no rho_beta/rho_gamma")
    beta_term = ops.tanh(state.beta_dec(ops.relu(state.rescale_enc(mu))))
    gamma_term = ops.sigmoid(state.gamma_dec(ops.relu(state.rescale_enc(sigma))))
    if pretrain_variant:
        beta_term = ops.mul(ops.sigmoid(state.rho_beta), beta_term)
        gamma_term = ops.mul(ops.sigmoid(state.rho_gamma), gamma_term)
    return ops.add(beta_term, state.beta_bias), ops.add(gamma_term, state.gamma_bias)


def ar_forward(x_stan, mu, sigma, state: ASRState, pretrain_variant: bool | None = None) -> Tensor:
    """Adaptive rescaling of already-standardized activations.

    ``mu``/``sigma`` must be the raw channel statistics of the layer input.
    """
    d = x_stan.data if isinstance(x_stan, Tensor) else np.asarray(x_stan)
    c = state.channels
    for name, v in (("mu", mu), ("sigma", sigma)):
        shp = v.shape if isinstance(v, Tensor) else np.shape(v)
        if shp[-1] != c:
            raise ShapeError(f"{name} has {shp[-1]} channels, layer expects {c}")
    if d.ndim != 4 or d.shape[1] != c:
        raise ShapeError(f"x_stan shape {d.shape} incompatible with {c} channels")
    beta, gamma = rescale_stats(mu, sigma, state, pretrain_variant)
    return ops.add(ops.mul(x_stan, as_4d(gamma)), as_4d(beta))


def asr_forward(x, state: ASRState) -> Tensor:
    _check_state(x, state)
    stats = channel_stats(x)
    mu_stan, sigma_stan = learned_stats(stats, state)
    beta, gamma = rescale_stats(stats.mu, stats.sigma, state)
    return standardize_rescale(x, mu_stan, sigma_stan, gamma, beta, state.eps)
