"""Adversarial domain augmentation.

The maximization phase pushes each source image uphill on the
classification loss minus a feature-space transport penalty, with pixels
clipped to the valid range after every step. The minimization phase is the
ordinary training loop run on the growing union of original and synthetic
images.
"""

from __future__ import annotations

import logging
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field

import numpy as np

from . import datagen
from .model import Model, forward
from .numcore import ops
from .numcore.tensor import Tape, Tensor

log = logging.getLogger(__name__)


@dataclass
class AdaConfig:
    eta: float = 1.0  # penalty weight on the semantic cost
    step_size: float = 1.0  # ascent step alpha, in pixel units
    inner_steps: int = 25
    aug_rounds: int = 3
    interval: int = 1000  # optimizer steps between rounds
    clip_min: float = 0.0
    clip_max: float = 1.0
    chunk_size: int = 128  # images per ascent batch; changes results only through float rounding

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if self.step_size < 0:
            raise ValueError("step_size must be >= 0")
        if self.inner_steps < 0 or self.aug_rounds < 0:
            raise ValueError("inner_steps and aug_rounds must be >= 0")
        if self.interval < 1 or self.chunk_size < 1:
            raise ValueError("interval and chunk_size must be >= 1")
        if not self.clip_min < self.clip_max:
            raise ValueError("clip range must satisfy clip_min < clip_max")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AugmentedSet:
    images: np.ndarray
    labels: np.ndarray
    round_index: int = 0
    source_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    aborted: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))  # kept originals

    def __len__(self) -> int:
        return len(self.labels)

    def to_dataset(self) -> datagen.Dataset:
        return datagen.Dataset(self.images, self.labels,
                               {"domain": f"ada:round{self.round_index}", "n": len(self)})


def semantic_cost(z, z_src, y=None, y_src=None) -> float:
    """Half squared Euclidean distance between feature vectors.

    Differing labels mean infinite cost; the ascent never changes labels, so
    that branch is a caller error rather than a float infinity.
    """
    z = np.asarray(z, dtype=np.float64)
    z_src = np.asarray(z_src, dtype=np.float64)
    if z.shape != z_src.shape:
        raise ValueError(f"feature shapes differ: {z.shape} vs {z_src.shape}")
    if y is not None and y_src is not None and np.any(np.asarray(y) != np.asarray(y_src)):
        raise ValueError("labels differ: transport between classes has infinite cost")
    return float(0.5 * np.sum((z - z_src) ** 2))


@contextmanager
def frozen(model: Model):
    """Temporarily stop parameter gradients so the ascent only differentiates inputs."""
    params = model.params()
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, f in zip(params, flags):
            p.requires_grad = f


def _features(model: Model, x) -> tuple[Tensor, Tensor]:
    logits, z = forward(model, x, "eval", want_features=True)
    if z is None:
        raise ValueError("semantic cost needs a hidden fully connected layer")
    return logits, z


def ascent_objective_grad(model: Model, x: np.ndarray, y: np.ndarray, z_src: np.ndarray,
                          eta: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradient w.r.t. ``x`` of sum_i [CE_i - eta * 0.5 ||z_i - z_src_i||^2].

    Returns (grad, per-sample CE, per-sample cost). Each sample's gradient
    depends only on its own terms because BN runs on its running statistics.
    """
    xt = Tensor(x, requires_grad=True)
    with frozen(model), Tape() as tape:
        logits, z = _features(model, xt)
        ce, probs = ops.softmax_cross_entropy(logits, y, reduction="sum")
        diff = ops.sub(z, z_src)
        cost = ops.mul(ops.sum(ops.square(diff)), 0.5)
        obj = ops.sub(ce, ops.mul(cost, eta)) if eta else ce
        tape.backward(obj)
    per_ce = -np.log(np.maximum(probs[np.arange(len(y)), y].astype(np.float64), 1e-300))
    per_cost = 0.5 * np.sum(np.square(diff.data.astype(np.float64)), axis=1)
    return xt.grad, per_ce, per_cost


def ada_maximize(model: Model, batch, config: AdaConfig, *, round_index: int = 0) -> AugmentedSet:
    """Synthesize one adversarial copy of every image in ``batch``.

    ``batch`` is a Dataset or an (images, labels) pair. Model parameters and
    BN running statistics are left untouched. A sample whose gradient turns
    non-finite is reverted to its original image.
    """
    images, labels = (batch.images, batch.labels) if isinstance(batch, datagen.Dataset) else batch
    images = np.asarray(images)
    labels = np.asarray(labels, dtype=np.int64)
    if images.size and (images.min() < config.clip_min or images.max() > config.clip_max):
        raise ValueError("source pixels must lie inside the clip range")
    out = images.astype(images.dtype if images.dtype.kind == "f" else np.float32, copy=True)
    aborted = []
    if config.inner_steps and config.step_size:
        for start in range(0, len(labels), config.chunk_size):
            sl = slice(start, start + config.chunk_size)
            x0, y = out[sl].copy(), labels[sl]
            _, z0 = _features(model, x0)
            z_src = z0.data.copy()
            x = x0.copy()
            bad = np.zeros(len(y), dtype=bool)
            for _ in range(config.inner_steps):
                g, _, _ = ascent_objective_grad(model, x, y, z_src, config.eta)
                nonfinite = ~np.isfinite(g).reshape(len(y), -1).all(axis=1)
                if nonfinite.any():
                    bad |= nonfinite
                    g = np.where(nonfinite[:, None, None, None], 0.0, g)
                x = np.clip(x + config.step_size * g, config.clip_min, config.clip_max).astype(x.dtype)
            if bad.any():
                idx = np.flatnonzero(bad)
                log.warning("ascent produced non-finite gradients for %d samples; keeping originals", len(idx))
                x[idx] = x0[idx]
                aborted.extend((start + idx).tolist())
            out[sl] = x
    return AugmentedSet(out, labels.copy(), round_index, np.arange(len(labels), dtype=np.int64),
                        np.asarray(aborted, dtype=np.int64))


def ada_train(model: Model, source: datagen.Dataset, ada_config: AdaConfig, train_config, **kwargs):
    """Alternate training steps with maximization rounds; see :func:`trainer.train`."""
    from .trainer import train

    return train(model, source, train_config, ada_config, **kwargs)
