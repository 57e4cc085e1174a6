"""JSON run configuration: schema validation and default resolution.

A run config has up to six sections, all optional::

    {"model": {...}, "norm": {...}, "train": {...},
     "ada": {...}, "data": {...}, "eval": {...}}

Unknown sections or keys are rejected, listing every offending dotted path.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from .augment import AdaConfig
from .model import ModelConfig
from .norms import NormConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("; ".join(problems))


@dataclass
class DataConfig:
    seed: int = 0  # clean training images
    n_train: int = 1000
    test_seed: int = 1  # clean evaluation images
    n_test: int = 500
    corruption_seed: int = 0
    train_path: str | None = None  # dataset file; overrides seed/n_train

    def __post_init__(self):
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("n_train and n_test must be >= 1")


@dataclass
class EvalConfig:
    grid: Any = "corruptions"  # "corruptions", "styles", "all" or a list of domain specs
    batch_size: int = 256
    enabled: bool = True  # run the grid at the end of training

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("eval batch_size must be >= 1")


@dataclass
class AdaSection(AdaConfig):
    enabled: bool = False


# the run-level defaults differ from the library defaults so that an empty
# config is a quick smoke run rather than a full experiment
RUN_DEFAULTS = {"train": {"epochs": 1}}

SECTIONS = {
    "model": ModelConfig,
    "norm": NormConfig,
    "train": TrainConfig,
    "ada": AdaSection,
    "data": DataConfig,
    "eval": EvalConfig,
}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ada: AdaSection = field(default_factory=AdaSection)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def norm(self) -> NormConfig:
        return self.model.norm

    @property
    def ada_config(self) -> AdaConfig | None:
        if not self.ada.enabled:
            return None
        fields = {f.name for f in dataclasses.fields(AdaConfig)}
        return AdaConfig(**{k: v for k, v in asdict(self.ada).items() if k in fields})

    def to_dict(self) -> dict:
        model = self.model.to_dict()
        norm = model.pop("norm")
        return {"model": model, "norm": norm, "train": asdict(self.train), "ada": asdict(self.ada),
                "data": asdict(self.data), "eval": asdict(self.eval)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _type_ok(value, default, annotation: str) -> bool:
    if annotation.startswith("Any"):
        return True
    if value is None:
        return "None" in annotation or "Optional" in annotation
    if isinstance(value, bool):
        return "bool" in annotation
    if isinstance(value, int):
        return any(t in annotation for t in ("int", "float"))
    if isinstance(value, float):
        return "float" in annotation
    if isinstance(value, str):
        return "str" in annotation
    if isinstance(value, list):
        return "tuple" in annotation or "list" in annotation
    return False


def _coerce(value, annotation: str):
    if isinstance(value, list):
        return tuple(value)
    if isinstance(value, int) and not isinstance(value, bool) and annotation.startswith("float"):
        return float(value)
    return value


def parse_run_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError(["config must be a JSON object"])
    problems = [f"unknown section {key!r}" for key in doc if key not in SECTIONS]
    built = {}
    for name, cls in SECTIONS.items():
        section = dict(RUN_DEFAULTS.get(name, {}))
        given = doc.get(name, {})
        if not isinstance(given, dict):
            problems.append(f"section {name!r} must be an object")
            continue
        section.update(given)
        known = {f.name: f for f in dataclasses.fields(cls)}
        if name == "model":
            known.pop("norm", None)
        kwargs = {}
        for key, value in section.items():
            if key not in known:
                problems.append(f"unknown key {name}.{key!r}")
                continue
            ann = str(known[key].type)
            if not _type_ok(value, known[key].default, ann):
                problems.append(f"{name}.{key}: expected {ann}, got {type(value).__name__}")
                continue
            kwargs[key] = _coerce(value, ann)
        built[name] = (cls, kwargs)
    if problems:
        raise ConfigError(problems)

    objects = {}
    for name, (cls, kwargs) in built.items():
        try:
            objects[name] = cls(**kwargs)
        except (TypeError, ValueError) as exc:
            problems.append(f"{name}: {exc}")
    if problems:
        raise ConfigError(problems)
    model = objects["model"]
    model.norm = objects["norm"]
    try:
        model.spatial_dims()
    except ValueError as exc:
        raise ConfigError([f"model: {exc}"]) from exc
    if objects["train"].batch_size < 2 and model.norm.kind in ("bn", "bn_test"):
        raise ConfigError(["train.batch_size must be >= 2 with batch normalization"])
    return RunConfig(model=model, train=objects["train"], ada=objects["ada"],
                     data=objects["data"], eval=objects["eval"])


def load_run_config(path) -> RunConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError([f"invalid JSON: {exc}"]) from exc
    return parse_run_config(doc)
