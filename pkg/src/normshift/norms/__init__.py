"""The normalization family and a seeded constructor for each kind.

Kinds: ``none``, ``bn``, ``bn_test``, ``in``, ``ln``, ``gn``, ``sn``,
``as`` (adaptive standardization + plain affine), ``ar`` (instance
standardization + adaptive rescaling) and ``asr`` (both).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Union

import numpy as np

from ..numcore.tensor import DEFAULT_DTYPE, Param
from .asr import (
    ASRState,
    Dense,
    ar_forward,
    as_forward,
    asr_forward,
    learned_stats,
    rescale_stats,
)
from .classic import (
    BNState,
    GroupSpec,
    GroupState,
    SNState,
    bn_forward,
    bn_test_forward,
    group_forward,
    masked_softmax,
    sn_forward,
)
from .stats import EPS, ChannelStats, channel_stats, standardize, standardize_rescale

NORM_KINDS = ("none", "bn", "bn_test", "in", "ln", "gn", "sn", "as", "ar", "asr")

NormState = Union[BNState, GroupState, SNState, ASRState]


@dataclass
class NormConfig:
    kind: str = "asr"
    eps: float = EPS
    momentum: float = 0.9
    groups: int = 8
    include_bn: bool = False
    stan_divisor: int = 2
    rescale_divisor: int = 16
    c_stan: int | None = None
    c_rescale: int | None = None
    rho_init: float = -3.0
    pretrain_variant: bool = False
    pretrain_rho_init: float = -5.0

    def __post_init__(self):
        if self.kind not in NORM_KINDS:
            raise ValueError(f"unknown norm kind {self.kind!r}; expected one of {NORM_KINDS}")

    def to_dict(self) -> dict:
        return asdict(self)


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dtype)


def _dense(name: str, rng, fan_in: int, fan_out: int, dtype) -> Dense:
    return Dense(Param(f"{name}.weight", glorot_uniform(rng, fan_out, fan_in, dtype)),
                 Param(f"{name}.bias", np.zeros(fan_out, dtype=dtype)))


def bottleneck_sizes(c: int, config: NormConfig) -> tuple[int, int]:
    c_stan = config.c_stan if config.c_stan is not None else c // config.stan_divisor
    c_rescale = config.c_rescale if config.c_rescale is not None else max(1, c // config.rescale_divisor)
    return c_stan, c_rescale


def init_norm(kind: str, channels: int, config: NormConfig | None = None, *,
              prefix: str = "norm", rng: np.random.Generator | int | None = 0,
              dtype=DEFAULT_DTYPE) -> NormState | None:
    """Build the state for one normalization layer over ``channels`` channels."""
    config = config or NormConfig(kind=kind)
    if kind not in NORM_KINDS:
        raise ValueError(f"unknown norm kind {kind!r}")
    if kind == "none":
        return None
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    c = channels
    ones = lambda name: Param(f"{prefix}.{name}", np.ones(c, dtype=dtype))  # noqa: E731
    zeros = lambda name: Param(f"{prefix}.{name}", np.zeros(c, dtype=dtype))  # noqa: E731

    if kind in ("bn", "bn_test"):
        return BNState(ones("gamma"), zeros("beta"), np.zeros(c, dtype=dtype), np.ones(c, dtype=dtype),
                       momentum=config.momentum, eps=config.eps, test_batch_stats=kind == "bn_test")
    if kind in ("in", "ln", "gn"):
        groups = {"in": c, "ln": 1, "gn": config.groups}[kind]
        if c % groups:
            raise ValueError(f"{groups} groups do not divide {c} channels")
        return GroupState(GroupSpec(groups), ones("gamma"), zeros("beta"), eps=config.eps)
    if kind == "sn":
        return SNState(Param(f"{prefix}.mean_logits", np.zeros(3, dtype=dtype)),
                       Param(f"{prefix}.std_logits", np.zeros(3, dtype=dtype)),
                       ones("gamma"), zeros("beta"), np.zeros(c, dtype=dtype), np.ones(c, dtype=dtype),
                       include_bn=config.include_bn, momentum=config.momentum, eps=config.eps)

    # as / ar / asr
    adaptive_stan = kind in ("as", "asr")
    adaptive_rescale = kind in ("ar", "asr")
    if c < 2:
        raise ValueError("adaptive normalization needs at least 2 channels")
    c_stan, c_rescale = bottleneck_sizes(c, config)
    if adaptive_stan and not 1 <= c_stan < c:
        raise ValueError(f"standardization bottleneck C_stan={c_stan} must satisfy 1 <= C_stan < C={c}")
    if adaptive_rescale and not 1 <= c_rescale < c:
        raise ValueError(f"rescaling bottleneck C_rescale={c_rescale} must satisfy 1 <= C_rescale < C={c}")
    state = ASRState(channels=c, gamma_bias=ones("gamma_bias" if adaptive_rescale else "gamma"),
                     beta_bias=zeros("beta_bias" if adaptive_rescale else "beta"), eps=config.eps)
    if adaptive_stan:
        state.stan_enc = _dense(f"{prefix}.stan_enc", rng, c, c_stan, dtype)
        state.mu_dec = _dense(f"{prefix}.mu_dec", rng, c_stan, c, dtype)
        state.sigma_dec = _dense(f"{prefix}.sigma_dec", rng, c_stan, c, dtype)
        state.rho_mu = Param(f"{prefix}.rho_mu", np.array(config.rho_init, dtype=dtype))
        state.rho_sigma = Param(f"{prefix}.rho_sigma", np.array(config.rho_init, dtype=dtype))
    if adaptive_rescale:
        state.rescale_enc = _dense(f"{prefix}.rescale_enc", rng, c, c_rescale, dtype)
        state.beta_dec = _dense(f"{prefix}.beta_dec", rng, c_rescale, c, dtype)
        state.gamma_dec = _dense(f"{prefix}.gamma_dec", rng, c_rescale, c, dtype)
        if config.pretrain_variant:
            state.rho_beta = Param(f"{prefix}.rho_beta", np.array(config.pretrain_rho_init, dtype=dtype))
            state.rho_gamma = Param(f"{prefix}.rho_gamma", np.array(config.pretrain_rho_init, dtype=dtype))
    return state


def apply_norm(state: NormState | None, x, mode: str = "train"):
    if state is None:
        return x
    return state.forward(x, mode)


__all__ = [
    "ASRState", "BNState", "ChannelStats", "Dense", "EPS", "GroupSpec", "GroupState", "NORM_KINDS",
    "NormConfig", "NormState", "SNState", "apply_norm", "ar_forward", "as_forward", "asr_forward",
    "bn_forward", "bn_test_forward", "bottleneck_sizes", "channel_stats", "glorot_uniform",
    "group_forward", "init_norm", "learned_stats", "masked_softmax", "rescale_stats", "sn_forward",
    "standardize", "standardize_rescale",
]
