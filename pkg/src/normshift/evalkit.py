"""Accuracy, Brier score, domain-grid evaluation and diagnostics export.

CSV layouts (fixed column order, floats written with 6 decimals):

* ``metrics.csv``: ``run_id,domain,level,n,accuracy,brier``
* ``trajectory.csv``: ``step,layer,lambda_mu,lambda_sigma,lambda_beta,lambda_gamma``
  (absent residual weights are left blank)
* ``stats_dump.csv``: ``domain,label,mu_0..mu_{C-1},sigma_0..sigma_{C-1}``
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import datagen
from .model import Model, predict_proba
from .norms import ASRState, channel_stats, learned_stats
from .numcore import ops
from .numcore.tensor import Tensor

METRICS_HEADER = ("run_id", "domain", "level", "n", "accuracy", "brier")
TRAJECTORY_HEADER = ("step", "layer", "lambda_mu", "lambda_sigma", "lambda_beta", "lambda_gamma")


def accuracy(logits, labels) -> float:
    """Fraction of rows whose argmax equals the label (ties go to the lowest index)."""
    logits = np.asarray(logits.data if isinstance(logits, Tensor) else logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"logits {logits.shape} and labels {labels.shape} disagree")
    if len(labels) == 0:
        raise ValueError("accuracy of an empty batch is undefined")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def brier(probs, labels, num_classes: int | None = None) -> float:
    """sum_k (1{k=y} - p_k)^2 / K, averaged over the batch."""
    p = np.asarray(probs, dtype=np.float64)
    single = p.ndim == 1
    if single:
        p = p[None]
    y = np.atleast_1d(np.asarray(labels))
    k = p.shape[1] if num_classes is None else num_classes
    if p.ndim != 2 or p.shape[1] != k or y.shape != (p.shape[0],):
        raise ValueError(f"probs {p.shape} incompatible with labels {y.shape} and K={k}")
    if len(y) == 0:
        raise ValueError("Brier score of an empty batch is undefined")
    if (p < 0).any() or np.abs(p.sum(axis=1) - 1.0).max() > 1e-4:
        raise ValueError("probabilities must be nonnegative and sum to 1 within 1e-4")
    if y.min() < 0 or y.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    onehot = np.zeros_like(p)
    onehot[np.arange(len(y)), y] = 1.0
    return float(np.mean(np.sum((onehot - p) ** 2, axis=1) / k))


@dataclass
class DomainResult:
    domain: str
    level: int
    n: int
    accuracy: float
    brier: float

    def row(self, run_id: str) -> tuple:
        return (run_id, self.domain, self.level, self.n, self.accuracy, self.brier)


@dataclass
class EvalReport:
    results: list[DomainResult]
    model_fingerprint: str = ""
    config_fingerprint: str = ""

    def level_means(self) -> dict[int, tuple[float, float]]:
        """(accuracy, brier) averaged over corruption types at each level >= 1."""
        out = {}
        for lvl in sorted({r.level for r in self.results if r.level > 0}):
            rs = [r for r in self.results if r.level == lvl]
            out[lvl] = (float(np.mean([r.accuracy for r in rs])), float(np.mean([r.brier for r in rs])))
        return out

    def overall(self) -> tuple[float, float]:
        return (float(np.mean([r.accuracy for r in self.results])),
                float(np.mean([r.brier for r in self.results])))

    def lookup(self, domain: str, level: int) -> DomainResult:
        for r in self.results:
            if r.domain == domain and r.level == level:
                return r
        raise KeyError((domain, level))

    def rows(self, run_id: str) -> list[tuple]:
        return [r.row(run_id) for r in self.results]


def evaluate_dataset(model: Model, ds: datagen.Dataset, batch_size: int = 256) -> tuple[float, float]:
    probs = predict_proba(model, ds.images, batch_size)
    return accuracy(probs, ds.labels), brier(probs, ds.labels, model.config.num_classes)


def corruption_grid(types=datagen.CORRUPTION_TYPES, levels=range(1, 6), seed: int = 0,
                    include_source: bool = True) -> list[datagen.DomainSpec]:
    specs = [datagen.DomainSpec("source", seed=seed)] if include_source else []
    specs += [datagen.DomainSpec("corruption", t, lvl, seed) for t in types for lvl in levels]
    return specs


def evaluate_grid(model: Model, domain_specs, base: datagen.Dataset, batch_size: int = 256) -> EvalReport:
    """Evaluate ``model`` on every spec applied to the clean test set ``base``."""
    results = []
    for spec in domain_specs:
        if isinstance(spec, str):
            spec = datagen.DomainSpec.parse(spec)
        ds = datagen.make_domain(spec, base)
        acc, bs = evaluate_dataset(model, ds, batch_size)
        results.append(DomainResult(spec.tag, spec.level, len(ds), acc, bs))
    return EvalReport(results, model_fingerprint=model.checksum())


# ----------------------------------------------------------------------------
# CSV writers


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def write_csv(path, header, rows) -> None:
    Path(path).write_text(csv_text(header, rows), encoding="utf-8")


def write_metrics(path, rows) -> None:
    write_csv(path, METRICS_HEADER, rows)


def read_metrics(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# ----------------------------------------------------------------------------
# residual weight trajectories


@dataclass
class TrajectoryLog:
    entries: list[tuple] = field(default_factory=list)  # (step, layer, lam_mu, lam_sigma, lam_beta, lam_gamma)

    def append(self, step: int, layer: str, weights: dict) -> None:
        if self.entries and step < self.entries[-1][0]:
            raise ValueError(f"trajectory steps must not go backwards ({step} after {self.entries[-1][0]})")
        if self.entries and step == self.entries[-1][0] and any(
                e[0] == step and e[1] == layer for e in self.entries):
            raise ValueError(f"step {step} already logged for {layer}")
        self.entries.append((step, layer, weights.get("lambda_mu"), weights.get("lambda_sigma"),
                             weights.get("lambda_beta"), weights.get("lambda_gamma")))

    def steps(self) -> list[int]:
        return sorted({e[0] for e in self.entries})

    def layer_series(self, layer: str, key: str) -> list[tuple[int, float]]:
        col = TRAJECTORY_HEADER.index(key)
        return [(e[0], e[col]) for e in self.entries if e[1] == layer]

    def __len__(self) -> int:
        return len(self.entries)

    def write(self, path) -> None:
        write_csv(path, TRAJECTORY_HEADER, self.entries)


def log_residual_weights(model: Model, step: int, log: TrajectoryLog) -> TrajectoryLog:
    """Append sigmoid of every residual logit of every ASR layer at ``step``."""
    layers = [(name, st) for name, st in model.asr_layers() if st.residual_weights()]
    if not layers:
        warnings.warn("model has no ASR residual weights; nothing logged", RuntimeWarning, stacklevel=2)
        return log
    for name, st in layers:
        log.append(step, name, st.residual_weights())
    return log


# ----------------------------------------------------------------------------
# learned standardization statistics


def learned_statistics(model: Model, images: np.ndarray, layer: str | None = None,
                       batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """(mu_stan, sigma_stan), each (N, C), at an ASR layer (default: the first)."""
    asr = dict(model.asr_layers())
    if not asr:
        raise ValueError("learned statistics require a model with ASR layers")
    layer = layer or next(iter(asr))
    if layer not in asr:
        raise ValueError(f"{layer!r} is not an ASR layer; choose from {sorted(asr)}")
    target = int(layer[len("norm"):]) - 1
    cfg = model.config
    mus, sigmas = [], []
    for i in range(0, len(images), batch_size):
        h = Tensor(np.asarray(images[i:i + batch_size]))
        for j, st in enumerate(model.stages[:target + 1]):
            h = ops.conv2d(h, st.weight, st.bias, stride=1, pad=cfg.pad)
            if j == target:
                break
            h = ops.relu(st.norm.forward(h, "eval") if st.norm is not None else h)
            h = ops.maxpool2d(h, cfg.pool)
        mu, sigma = learned_stats(channel_stats(h), asr[layer])
        mus.append(np.asarray(mu.data))
        sigmas.append(np.asarray(sigma.data))
    return np.concatenate(mus), np.concatenate(sigmas)


def dump_learned_stats(model: Model, dataset: datagen.Dataset, path, layer: str | None = None,
                       domain: str | None = None) -> int:
    """Write one CSV row per sample: domain tag, label, then C means and C stds."""
    mu, sigma = learned_statistics(model, dataset.images, layer)
    tag = domain or str(dataset.manifest.get("domain", "unknown"))
    c = mu.shape[1]
    header = ["domain", "label"] + [f"mu_{i}" for i in range(c)] + [f"sigma_{i}" for i in range(c)]
    rows = ([tag, int(y)] + [float(v) for v in m] + [float(v) for v in s]
            for y, m, s in zip(dataset.labels, mu, sigma))
    write_csv(path, header, rows)
    return len(dataset)


def is_asr_model(model: Model) -> bool:
    return any(isinstance(n, ASRState) for _, n in model.norm_layers())
