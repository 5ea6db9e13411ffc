"""Run configuration: one document that covers the task, the learner, the
fitness weights, the evolution budget, and the generation endpoint.

Files may be YAML or JSON. Parsing is strict: any key the schema does not
know is rejected with its full path (e.g. `evolution.seed_specs[0].mu`), so
typos fail loudly instead of silently running defaults.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import yaml

from .dataio import build_splits, make_synthetic
from .dsl import SpecError, parse
from .evaluator import EvalConfig
from .fscil import FscilConfig
from .generator import EndpointConfig
from .orchestrator import EvolutionConfig


class ConfigError(ValueError):
    """A configuration document is unusable; the message names the field."""


@dataclass(frozen=True)
class TaskConfig:
    """Synthetic task geometry and the incremental protocol dimensions."""

    classes: int = 40
    per_class: int = 50
    features: int = 32
    separation: float = 6.0
    base_classes: int = 20
    sessions: int = 4
    way: int = 5
    shot: int = 5
    test_per_class: int = 30
    seed: int = 0

    def build(self):
        ds = make_synthetic(
            self.classes, self.per_class, self.features, self.separation, self.seed
        )
        split = build_splits(
            ds, self.base_classes, self.sessions, self.way, self.shot,
            self.test_per_class, self.seed,
        )
        return ds, split


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    task: TaskConfig = field(default_factory=TaskConfig)
    fscil: FscilConfig = field(default_factory=FscilConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    evolution: EvolutionConfig = field(default_factory=EvolutionConfig)
    endpoint: EndpointConfig = field(default_factory=EndpointConfig)


_TASK = {
    "classes": "int", "per_class": "int", "features": "int",
    "separation": "float", "base_classes": "int", "sessions": "int",
    "way": "int", "shot": "int", "test_per_class": "int", "seed": "int",
}
_FSCIL = {"epochs": "int", "lr": "float", "hidden": "int_list", "batch_size": "int"}
_EVAL = {
    "alpha": "float", "w_succ": "float", "w_cost": "float",
    "penalty": "float", "eps_max": "float", "t_max": "int",
}
_EVOLUTION = {
    "population_size": "int", "t_max": "int", "offspring": "int",
    "window": "int", "tol": "float", "update_interval": "int",
    "intensity": "float", "seed_specs": "specs",
}
_ENDPOINT = {
    "base_url": "str", "model": "str", "temperature": "float",
    "timeout": "float", "retries": "int", "backoff": "float",
    "max_in_flight": "int",
}

_SECTIONS = (
    ("task", TaskConfig, _TASK),
    ("fscil", FscilConfig, _FSCIL),
    ("evaluation", EvalConfig, _EVAL),
    ("evolution", EvolutionConfig, _EVOLUTION),
    ("endpoint", EndpointConfig, _ENDPOINT),
)


def _coerce(value, kind: str, path: str):
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"`{path}` must be an integer, got {value!r}")
        return value
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"`{path}` must be a number, got {value!r}")
        return float(value)
    if kind == "str":
        if not isinstance(value, str):
            raise ConfigError(f"`{path}` must be a string, got {value!r}")
        return value
    if kind == "int_list":
        if not isinstance(value, (list, tuple)) or not all(
            isinstance(v, int) and not isinstance(v, bool) for v in value
        ):
            raise ConfigError(f"`{path}` must be a list of integers, got {value!r}")
        return tuple(value)
    if kind == "specs":
        if not isinstance(value, list):
            raise ConfigError(f"`{path}` must be a list of attack documents")
        specs = []
        for i, entry in enumerate(value):
            if not isinstance(entry, dict):
                raise ConfigError(f"`{path}[{i}]` must be a mapping")
            try:
                specs.append(parse(json.dumps(entry)))
            except SpecError as exc:
                raise ConfigError(f"`{path}[{i}]`: {exc}") from exc
        return tuple(specs)
    raise AssertionError(f"unhandled coercion kind {kind}")


def _build_section(cls, schema: dict, doc, path: str):
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"`{path}` must be a mapping, got {doc!r}")
    for key in doc:
        if key not in schema:
            raise ConfigError(f"unknown config key `{path}.{key}`")
    kwargs = {
        name: _coerce(doc[name], kind, f"{path}.{name}")
        for name, kind in schema.items()
        if name in doc
    }
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"`{path}`: {exc}") from exc


def from_dict(doc) -> RunConfig:
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"configuration root must be a mapping, got {doc!r}")
    known = {"seed"} | {name for name, _, _ in _SECTIONS}
    for key in doc:
        if key not in known:
            raise ConfigError(f"unknown config key `{key}`")
    kwargs = {}
    if "seed" in doc:
        kwargs["seed"] = _coerce(doc["seed"], "int", "seed")
    for name, cls, schema in _SECTIONS:
        kwargs[name] = _build_section(cls, schema, doc.get(name), name)
    return RunConfig(**kwargs)


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as handle:
            text = handle.read()
    except OSError as exc:
        raise ConfigError(f"could not read config {path}: {exc}") from exc
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"could not parse config {path}: {exc}") from exc
    return from_dict(doc)
