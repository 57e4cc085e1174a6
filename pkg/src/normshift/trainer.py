"""Optimizers and the supervised training loop shared by ERM and ADA runs."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Optional

import numpy as np

from . import datagen
from .evalkit import TrajectoryLog, evaluate_dataset, log_residual_weights, write_metrics
from .model import Model, forward, save_checkpoint
from .norms import BNState, SNState
from .numcore import ops
from .numcore.tensor import Param, Tape

if TYPE_CHECKING:
    from .augment import AdaConfig

log = logging.getLogger(__name__)

OPTIMIZERS = ("adam", "sgd_momentum")
SCHEDULES = ("constant", "cosine")


class NumericalError(FloatingPointError):
    """Non-finite loss or gradient during training."""


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    batch_size: int = 32
    epochs: int = 10
    total_steps: Optional[int] = None  # overrides epochs when set
    lr_schedule: str = "constant"
    seed: int = 0
    eval_every: int = 0  # optimizer steps between evaluations; 0 means once per epoch

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.lr_schedule not in SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {SCHEDULES}, got {self.lr_schedule!r}")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1 or self.epochs < 0 or self.eval_every < 0:
            raise ValueError("batch_size must be >= 1 and epochs/eval_every >= 0")
        if self.total_steps is not None and self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


# ----------------------------------------------------------------------------
# optimizers


def _check_grads(params: list[Param]) -> None:
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NumericalError(f"non-finite gradient in {p.name}")


def sgd_step(params: list[Param], velocity: dict[str, np.ndarray], lr: float, momentum: float = 0.0) -> None:
    """v <- momentum*v + g; w <- w - lr*v. Gradients are zeroed afterwards."""
    _check_grads(params)
    for p in params:
        v = velocity.get(p.name)
        if v is None:
            v = velocity[p.name] = np.zeros_like(p.data)
        v *= momentum
        v += p.grad
        p.data -= (lr * v).astype(p.data.dtype)
        p.zero_grad()


def adam_step(params: list[Param], state: dict[str, np.ndarray], lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam; ``state['t']`` counts steps. Gradients are zeroed afterwards."""
    _check_grads(params)
    t = int(state.get("t", 0)) + 1
    state["t"] = t
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p in params:
        m = state.get(p.name + ".m")
        if m is None:
            m = state[p.name + ".m"] = np.zeros_like(p.data)
            state[p.name + ".v"] = np.zeros_like(p.data)
        v = state[p.name + ".v"]
        g = p.grad
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype)
        p.zero_grad()


class Optimizer:
    def __init__(self, params: list[Param], config: TrainConfig):
        self.params = params
        self.config = config
        self.state: dict = {}

    def step(self, lr: float) -> None:
        c = self.config
        if c.optimizer == "adam":
            adam_step(self.params, self.state, lr, c.beta1, c.beta2, c.eps_opt)
        else:
            sgd_step(self.params, self.state, lr, c.momentum)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {f"opt.{k}": np.asarray(v, dtype=np.float32) for k, v in self.state.items() if k != "t"}
        if "t" in self.state:
            out["opt.t"] = np.array(self.state["t"], dtype=np.float32)
        return out


def learning_rate(config: TrainConfig, step: int, total: int) -> float:
    if config.lr_schedule == "constant" or total <= 0:
        return config.lr
    return config.lr * (1.0 + math.cos(math.pi * step / total)) / 2.0


# ----------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: Model
    metrics: list[tuple] = field(default_factory=list)
    trajectory: TrajectoryLog = field(default_factory=TrajectoryLog)
    losses: list[float] = field(default_factory=list)
    ada_rounds: list[int] = field(default_factory=list)  # optimizer steps at which rounds ran
    pool_sizes: list[int] = field(default_factory=list)  # training-set size after each round
    steps: int = 0


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


def has_batch_stats(model: Model) -> bool:
    return any(isinstance(n, BNState) or (isinstance(n, SNState) and n.mask()[0]) for _, n in model.norm_layers())


def train(model: Model, dataset: datagen.Dataset, config: TrainConfig,
          ada_config: "AdaConfig | None" = None, *, eval_set: datagen.Dataset | None = None,
          run_id: str = "run", out_dir=None) -> TrainResult:
    """Minimize mean cross-entropy over the (possibly growing) training pool.

    An epoch is ceil(n_source / batch) steps over a fresh permutation of the
    current pool. With ``ada_config``, every ``interval`` steps one
    maximization round over the source set is appended to the pool, up to
    ``aug_rounds`` rounds. Each evaluation cadence appends a metrics row on
    ``eval_set``, logs residual weights and refreshes the checkpoint.
    """
    from .augment import ada_maximize

    n_src = len(dataset)
    bs = config.batch_size
    if has_batch_stats(model) and (bs < 2 or n_src < 2):
        raise ValueError("batch size and training set must be >= 2 when the model has batch-statistics layers")
    steps_per_epoch = math.ceil(n_src / bs)
    if has_batch_stats(model) and n_src % bs == 1:
        steps_per_epoch -= 1  # the size-1 tail batch is skipped
    total = config.total_steps if config.total_steps is not None else config.epochs * steps_per_epoch
    cadence = config.eval_every or steps_per_epoch
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    params = model.params()
    opt = Optimizer(params, config)
    res = TrainResult(model)
    if total == 0:
        return res

    images = [dataset.images]
    labels = [dataset.labels]
    pool_x, pool_y = dataset.images, dataset.labels
    rounds_left = ada_config.aug_rounds if ada_config is not None else 0

    def checkpoint(step: int) -> None:
        if out is not None:
            save_checkpoint(model, out / "checkpoint.nsck",
                            meta={"run_id": run_id, "step": step, "train": config.to_dict()},
                            extra_tensors=opt.state_tensors())

    def cadence_hook(step: int) -> None:
        if eval_set is not None:
            acc, bs_ = evaluate_dataset(model, eval_set)
            res.metrics.append((f"{run_id}/step{step}", "source", 0, len(eval_set), acc, bs_))
        if model.asr_layers() and any(st.residual_weights() for _, st in model.asr_layers()):
            log_residual_weights(model, step, res.trajectory)
        checkpoint(step)

    cadence_hook(0)
    step = 0
    epoch = 0
    while step < total:
        perm = epoch_rng(config.seed, epoch).permutation(len(pool_y))[:n_src]
        for start in range(0, n_src, bs):
            if step >= total:
                break
            idx = perm[start:start + bs]
            if len(idx) < 2 and has_batch_stats(model):
                continue
            xb, yb = pool_x[idx], pool_y[idx]
            with Tape() as tape:
                logits, _ = forward(model, xb, "train")
                loss, _ = ops.softmax_cross_entropy(logits, yb)
                if not np.isfinite(loss.data):
                    raise NumericalError(f"non-finite loss at step {step}")
                tape.backward(loss)
            opt.step(learning_rate(config, step, total))
            res.losses.append(float(loss.data))
            step += 1
            if rounds_left and step % ada_config.interval == 0:
                aug = ada_maximize(model, dataset, ada_config, round_index=len(res.ada_rounds) + 1)
                images.append(aug.images)
                labels.append(aug.labels)
                pool_x = np.concatenate(images)
                pool_y = np.concatenate(labels)
                res.ada_rounds.append(step)
                res.pool_sizes.append(len(pool_y))
                rounds_left -= 1
                log.info("ada round %d at step %d, pool size %d", len(res.ada_rounds), step, len(pool_y))
            if step % cadence == 0 or step == total:
                cadence_hook(step)
        epoch += 1
    res.steps = step
    if out is not None:
        write_metrics(out / "metrics.csv", res.metrics)
        res.trajectory.write(out / "trajectory.csv")
    return res

