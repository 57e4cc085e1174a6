"""Command-line entry point: ``normshift <subcommand> ...``.

Exit codes: 0 ok, 1 I/O failure, 2 validation failure, 3 numerical failure.
"""

from __future__ import annotations

import os

# cap BLAS threads before numpy loads; one thread keeps results reproducible
_THREADS = os.environ.get("NORMSHIFT_THREADS", "1")
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, _THREADS)

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

from . import datagen  # noqa: E402
from .checks import DEFAULT_THRESHOLD, gradient_suite  # noqa: E402
from .config import ConfigError, load_run_config  # noqa: E402
from .evalkit import (  # noqa: E402
    corruption_grid,
    dump_learned_stats,
    evaluate_grid,
    is_asr_model,
    write_metrics,
)
from .model import CheckpointError, build_model, load_checkpoint  # noqa: E402
from .trainer import NumericalError, train  # noqa: E402

EXIT_OK, EXIT_IO, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 1, 2, 3

log = logging.getLogger("normshift")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _threads() -> int:
    try:
        n = int(_THREADS)
    except ValueError:
        raise CliError(EXIT_VALIDATION, f"NORMSHIFT_THREADS must be an integer, got {_THREADS!r}") from None
    if n < 1:
        raise CliError(EXIT_VALIDATION, "NORMSHIFT_THREADS must be >= 1")
    return n


def _grid_specs(grid, seed: int) -> list[datagen.DomainSpec]:
    if isinstance(grid, str) and grid in ("corruptions", "styles", "all"):
        specs = corruption_grid(seed=seed) if grid != "styles" else [datagen.DomainSpec("source", seed=seed)]
        if grid != "corruptions":
            specs += [datagen.DomainSpec("style", s, 0, seed) for s in datagen.STYLE_NAMES]
        return specs
    items = grid.split(",") if isinstance(grid, str) else list(grid)
    try:
        return [datagen.DomainSpec.parse(s, seed) for s in items]
    except ValueError as exc:
        raise CliError(EXIT_VALIDATION, str(exc)) from exc


def _load_model(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError as exc:
        raise CliError(EXIT_IO, f"checkpoint not found: {path}") from exc
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read checkpoint {path}: {exc}") from exc
    except CheckpointError as exc:
        raise CliError(EXIT_VALIDATION, f"invalid checkpoint {path}: {exc}") from exc


# ----------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    try:
        spec = datagen.DomainSpec.parse(args.spec, args.seed)
    except ValueError as exc:
        raise CliError(EXIT_VALIDATION, f"{exc}\nspec forms: source | corruption:<type>:<1-5> | style:<name>")
    if args.n < args.num_classes:
        raise CliError(EXIT_VALIDATION, f"--n must be >= --num-classes ({args.num_classes})")
    ds = datagen.generate(spec, args.n, args.num_classes)
    try:
        datagen.write_dataset(ds, args.out)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {args.out}: {exc}") from exc
    print(f"wrote {len(ds)} images {tuple(ds.images.shape[1:])} domain={spec} seed={args.seed} -> {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    try:
        cfg = load_run_config(args.config)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read config {args.config}: {exc}") from exc
    except ConfigError as exc:
        raise CliError(EXIT_VALIDATION, "invalid config: " + "; ".join(exc.problems)) from exc
    out = Path(args.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "resolved-config.json").write_text(cfg.to_json(), encoding="utf-8")
        if cfg.data.train_path:
            train_set = datagen.read_dataset(cfg.data.train_path)
        else:
            train_set = datagen.gen_source(cfg.data.seed, cfg.data.n_train, cfg.model.num_classes)
    except (OSError, datagen.DatasetFormatError) as exc:
        raise CliError(EXIT_IO, str(exc)) from exc
    if tuple(train_set.images.shape[1:]) != cfg.model.input_dims:
        raise CliError(EXIT_VALIDATION, f"training images {train_set.images.shape[1:]} do not match "
                                        f"model.input_dims {cfg.model.input_dims}")
    test_set = datagen.gen_source(cfg.data.test_seed, cfg.data.n_test, cfg.model.num_classes)
    model = build_model(cfg.model)
    try:
        res = train(model, train_set, cfg.train, cfg.ada_config, eval_set=test_set,
                    run_id=out.name or "run", out_dir=out)
    except NumericalError as exc:
        print(f"error: training diverged: {exc}; last good checkpoint kept in {out}", file=sys.stderr)
        return EXIT_NUMERICAL
    rows = list(res.metrics)
    if cfg.eval.enabled:
        report = evaluate_grid(model, _grid_specs(cfg.eval.grid, cfg.data.corruption_seed), test_set,
                               cfg.eval.batch_size)
        rows += report.rows(out.name or "run")
        write_metrics(out / "metrics.csv", rows)
    print(f"trained {res.steps} steps; artifacts in {out}")
    if res.ada_rounds:
        print(f"augmentation rounds at steps {res.ada_rounds}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = _load_model(args.checkpoint)
    specs = _grid_specs(args.grid, args.corruption_seed)
    base = datagen.gen_source(args.seed, args.n, model.config.num_classes)
    report = evaluate_grid(model, specs, base, args.batch_size)
    try:
        write_metrics(args.out, report.rows(args.run_id or Path(args.checkpoint).stem))
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {args.out}: {exc}") from exc
    acc, bs = report.overall()
    print(f"{len(report.results)} domains, mean accuracy {acc:.4f}, mean brier {bs:.4f} -> {args.out}")
    for lvl, (a, b) in report.level_means().items():
        print(f"  level {lvl}: accuracy {a:.4f} brier {b:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    errors = gradient_suite(seeds=range(args.seed, args.seed + args.seeds))
    worst = 0.0
    for name, err in errors.items():
        flag = "ok" if err < args.threshold else "FAIL"
        print(f"{name:14s} {err:.3e} {flag}")
        worst = max(worst, err)
    print(f"max error {worst:.3e} (threshold {args.threshold:.0e})")
    return EXIT_OK if worst < args.threshold else EXIT_NUMERICAL


def cmd_dump_stats(args) -> int:
    model = _load_model(args.checkpoint)
    if not is_asr_model(model):
        raise CliError(EXIT_VALIDATION, "dump-stats needs a checkpoint with ASR layers")
    try:
        spec = datagen.DomainSpec.parse(args.spec, args.corruption_seed)
    except ValueError as exc:
        raise CliError(EXIT_VALIDATION, str(exc)) from exc
    ds = datagen.make_domain(spec, datagen.gen_source(args.seed, args.n, model.config.num_classes))
    try:
        rows = dump_learned_stats(model, ds, args.out, layer=args.layer, domain=str(spec))
    except ValueError as exc:
        raise CliError(EXIT_VALIDATION, str(exc)) from exc
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {args.out}: {exc}") from exc
    print(f"wrote {rows} rows -> {args.out}")
    return EXIT_OK


# ----------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(EXIT_VALIDATION, message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="normshift", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a dataset file for one domain")
    g.add_argument("--spec", required=True, help="source | corruption:<type>:<level> | style:<name>")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--num-classes", type=int, default=10)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model from a JSON run config")
    t.add_argument("--config", required=True)
    t.add_argument("--out-dir", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a domain grid")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--grid", default="corruptions",
                   help="corruptions | styles | all | comma-separated domain specs")
    e.add_argument("--out", default="metrics.csv")
    e.add_argument("--n", type=int, default=1000)
    e.add_argument("--seed", type=int, default=1, help="seed of the clean test images")
    e.add_argument("--corruption-seed", type=int, default=0)
    e.add_argument("--batch-size", type=int, default=256)
    e.add_argument("--run-id", default=None)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of every layer")
    c.add_argument("--seeds", type=int, default=5)
    c.add_argument("--seed", type=int, default=0, help="first seed")
    c.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    c.set_defaults(func=cmd_gradcheck)

    d = sub.add_parser("dump-stats", help="export learned standardization statistics")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--spec", default="source")
    d.add_argument("--out", default="stats_dump.csv")
    d.add_argument("--n", type=int, default=500)
    d.add_argument("--seed", type=int, default=1)
    d.add_argument("--corruption-seed", type=int, default=0)
    d.add_argument("--layer", default=None, help="ASR layer name, e.g. norm1 (default: first)")
    d.set_defaults(func=cmd_dump_stats)
    return p


def main(argv=None) -> int:
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        _threads()
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
