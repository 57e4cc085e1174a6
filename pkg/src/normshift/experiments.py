"""Desk-scale ERM/ADA comparison of BN and ASR on the glyph benchmark.

One run = train on 5k clean glyphs for 10 epochs, then evaluate on the
clean test set and on all corruption types at levels 1..5. The training
and test data are shared by all runs; the seed varies model initialization
and batch order.
"""

from __future__ import annotations

import itertools
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import datagen
from .augment import AdaConfig
from .evalkit import EvalReport, TrajectoryLog, corruption_grid, evaluate_grid, write_metrics
from .model import Model, ModelConfig, build_model
from .norms import NormConfig
from .trainer import TrainConfig, train

log = logging.getLogger(__name__)

# step size in pixel units; steps small enough to keep the eta=1 ascent
# stable (<= 0.003) leave images of a fitted model unchanged, so ADA would
# be inert
DESK_ADA = AdaConfig(eta=1.0, step_size=1.0, inner_steps=25, aug_rounds=3, interval=400)
DESK_TRAIN = TrainConfig(optimizer="adam", lr=1e-3, batch_size=32, epochs=10)


@dataclass
class DeskSetup:
    n_train: int = 5000
    n_test: int = 1000
    train_seed: int = 0
    test_seed: int = 1
    corruption_seed: int = 0
    train: TrainConfig = field(default_factory=lambda: replace(DESK_TRAIN))
    ada: AdaConfig = field(default_factory=lambda: replace(DESK_ADA))


@dataclass
class RunOutcome:
    norm: str
    ada: bool
    seed: int
    report: EvalReport
    trajectory: TrajectoryLog
    ada_rounds: list[int]
    seconds: float
    model: Model | None = None

    @property
    def run_id(self) -> str:
        return f"{'ada' if self.ada else 'erm'}-{self.norm}-s{self.seed}"

    def level_accuracy(self) -> dict[int, float]:
        return {lvl: acc for lvl, (acc, _) in self.report.level_means().items()}

    def level_brier(self) -> dict[int, float]:
        return {lvl: bs for lvl, (_, bs) in self.report.level_means().items()}


def run_one(norm: str, ada: bool, seed: int, setup: DeskSetup, train_set=None, test_set=None,
            out_dir=None) -> RunOutcome:
    train_set = train_set if train_set is not None else datagen.gen_source(setup.train_seed, setup.n_train)
    test_set = test_set if test_set is not None else datagen.gen_source(setup.test_seed, setup.n_test)
    model = build_model(ModelConfig(norm=NormConfig(kind=norm), seed=seed))
    tcfg = replace(setup.train, seed=seed)
    start = time.time()
    res = train(model, train_set, tcfg, setup.ada if ada else None, eval_set=test_set,
                run_id=f"{'ada' if ada else 'erm'}-{norm}-s{seed}", out_dir=out_dir)
    report = evaluate_grid(model, corruption_grid(seed=setup.corruption_seed), test_set)
    outcome = RunOutcome(norm, ada, seed, report, res.trajectory, res.ada_rounds, time.time() - start, model)
    log.info("%s done in %.1fs: level means %s", outcome.run_id, outcome.seconds, outcome.level_accuracy())
    return outcome


def run_desk(norms=("bn", "asr"), ada_modes=(False, True), seeds=(0, 1, 2),
             setup: DeskSetup | None = None, out_dir=None) -> list[RunOutcome]:
    setup = setup or DeskSetup()
    train_set = datagen.gen_source(setup.train_seed, setup.n_train)
    test_set = datagen.gen_source(setup.test_seed, setup.n_test)
    outcomes = []
    for ada, norm, seed in itertools.product(ada_modes, norms, seeds):
        run_dir = None if out_dir is None else Path(out_dir) / f"{'ada' if ada else 'erm'}-{norm}-s{seed}"
        outcomes.append(run_one(norm, ada, seed, setup, train_set, test_set, run_dir))
    if out_dir is not None:
        rows = [row for o in outcomes for row in o.report.rows(o.run_id)]
        write_metrics(Path(out_dir) / "desk-metrics.csv", rows)
    return outcomes


def mean_by_level(outcomes: list[RunOutcome], norm: str, ada: bool, metric: str = "accuracy") -> dict[int, float]:
    sel = [o for o in outcomes if o.norm == norm and o.ada == ada]
    if not sel:
        raise ValueError(f"no runs for norm={norm} ada={ada}")
    per = [o.level_accuracy() if metric == "accuracy" else o.level_brier() for o in sel]
    return {lvl: float(np.mean([p[lvl] for p in per])) for lvl in per[0]}
