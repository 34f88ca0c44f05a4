"""
Run configuration: one JSON document with a section per module.

The schema is derived from the module config dataclasses, so a field added to
a dataclass is accepted in config files without further edits.
"""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema

from .baselines import LineConfig
from .embedding import TrainerConfig
from .experiments import LATENCY_RATIOS, ExperimentConfig
from .predictor import CLASSIFIERS, COLD_POLICIES, COMBINERS
from .synthetic import GeneratorConfig

SCHEMA_VERSION = "1"


class ConfigValidationError(ValueError):
    """Config document failed validation; ``fields`` names the offending keys."""

    def __init__(self, message: str, fields: list[str] | None = None):
        super().__init__(message)
        self.fields = fields or []


_JSON_TYPES = {int: "integer", float: "number", str: "string", bool: "boolean"}


def _field_schema(tp) -> dict:
    origin = typing.get_origin(tp)
    if origin is tuple:
        return {"type": "array", "items": {"type": "integer"}, "minItems": 2, "maxItems": 2}
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return {"type": [_JSON_TYPES[args[0]], "null"]}
    return {"type": _JSON_TYPES[tp]}


def dataclass_schema(cls, exclude=("seed", "workers")) -> dict:
    """Schema for a config dataclass. Seeds and worker counts come from the
    top level of the document, so sections may not set them."""
    hints = typing.get_type_hints(cls)
    props = {f.name: _field_schema(hints[f.name]) for f in dataclasses.fields(cls) if f.init and f.name not in exclude}
    return {"type": "object", "properties": props, "additionalProperties": False}


def _section(props: dict) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False}


SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "phagraph run configuration",
    "type": "object",
    "required": ["seed"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "workers": {"type": "integer", "minimum": 1},
        "generator": dataclass_schema(GeneratorConfig),
        "holdout": _section({"fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}}),
        "split": _section({"boundary": {"type": "integer"}, "horizon": {"type": "integer", "minimum": 1}}),
        "trainer": dataclass_schema(TrainerConfig),
        "line": dataclass_schema(LineConfig),
        "predictor": _section(
            {
                "classifier": {"enum": list(CLASSIFIERS)},
                "combiner": {"enum": list(COMBINERS)},
                "cold_policy": {"enum": list(COLD_POLICIES)},
            }
        ),
        "experiment": _section(
            {
                "methods": {"type": "array", "items": {"enum": ["pa", "first_order", "second_order", "full", "full_k1"]}},
                "replicates": {"type": "integer", "minimum": 1},
                "drop_ratios": {"type": "array", "items": {"type": "number", "minimum": 0, "exclusiveMaximum": 1}},
                "window_train": {"type": "integer", "minimum": 1},
                "window_test": {"type": "integer", "minimum": 1},
                "steps": {"type": "integer", "minimum": 1},
                "scales": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 1},
                "repeats": {"type": "integer", "minimum": 1},
            }
        ),
    },
}


@dataclass
class RunConfig:
    seed: int
    workers: int = 1
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    holdout_fraction: float | None = None
    boundary: int | None = None
    horizon: int | None = None
    trainer: TrainerConfig = field(default_factory=lambda: TrainerConfig(walk_length=8))
    line: LineConfig = field(default_factory=LineConfig)
    classifier: str = "tree_ensemble"
    combiner: str = "concat"
    cold_policy: str = "drop"
    methods: list[str] = field(default_factory=lambda: ["pa", "first_order", "second_order", "full"])
    replicates: int = 1
    drop_ratios: list[float] = field(default_factory=lambda: list(LATENCY_RATIOS))
    window_train: int = 6 * 86_400
    window_test: int = 86_400
    steps: int = 5
    scales: list[float] = field(default_factory=lambda: [1.0, 2.0, 4.0])
    repeats: int = 1

    def experiment_config(self) -> ExperimentConfig:
        return ExperimentConfig(
            dataset=self.generator,
            holdout_fraction=0.1 if self.holdout_fraction is None else self.holdout_fraction,
            trainer=self.trainer,
            line=self.line,
            classifier=self.classifier,
            combiner=self.combiner,
            cold_policy=self.cold_policy,
            workers=self.workers,
        )

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "workers": self.workers,
            "generator": _strip(self.generator.to_dict()),
            "holdout": {} if self.holdout_fraction is None else {"fraction": self.holdout_fraction},
            "split": {k: v for k, v in (("boundary", self.boundary), ("horizon", self.horizon)) if v is not None},
            "trainer": _strip(self.trainer.to_dict()),
            "line": _strip(self.line.to_dict()),
            "predictor": {"classifier": self.classifier, "combiner": self.combiner, "cold_policy": self.cold_policy},
            "experiment": {
                "methods": list(self.methods),
                "replicates": self.replicates,
                "drop_ratios": list(self.drop_ratios),
                "window_train": self.window_train,
                "window_test": self.window_test,
                "steps": self.steps,
                "scales": list(self.scales),
                "repeats": self.repeats,
            },
        }


def _strip(section: dict) -> dict:
    return {k: v for k, v in section.items() if k not in ("seed", "workers")}


def validate_document(doc) -> None:
    validator = jsonschema.Draft7Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if not errors:
        return
    msgs, names = [], []
    for err in errors:
        path = ".".join(str(p) for p in err.absolute_path)
        if err.validator == "required":
            missing = [r for r in err.validator_value if r not in err.instance]
            for r in missing:
                name = f"{path}.{r}" if path else r
                names.append(name)
                msgs.append(f"missing required field '{name}'")
        elif err.validator == "additionalProperties":
            extra = sorted(set(err.instance) - set(err.schema.get("properties", {})))
            for r in extra:
                name = f"{path}.{r}" if path else r
                names.append(name)
                msgs.append(f"unknown field '{name}'")
        else:
            names.append(path or "<root>")
            msgs.append(f"field '{path or '<root>'}': {err.message}")
    raise ConfigValidationError("invalid config: " + "; ".join(msgs), names)


def parse_config(doc: dict, **overrides) -> RunConfig:
    """Validate a config document and resolve it into a :class:`RunConfig`.

    Keyword ``overrides`` with a non-None value replace top-level fields.
    """
    doc = dict(doc)
    for key, value in overrides.items():
        if value is not None:
            doc[key] = value
    validate_document(doc)
    kw = {"seed": doc["seed"]}
    if "workers" in doc:
        kw["workers"] = doc["workers"]
    try:
        if "generator" in doc:
            kw["generator"] = GeneratorConfig(**doc["generator"])
            kw["generator"].validate()
        if "trainer" in doc:
            kw["trainer"] = TrainerConfig(**{"walk_length": 8, **doc["trainer"]})
            kw["trainer"].validate()
        if "line" in doc:
            kw["line"] = LineConfig(**doc["line"])
            kw["line"].validate()
    except ValueError as exc:
        raise ConfigValidationError(f"invalid config: {exc}") from exc
    kw.update(doc.get("predictor", {}))
    kw.update(doc.get("experiment", {}))
    if "holdout" in doc and "fraction" in doc["holdout"]:
        kw["holdout_fraction"] = doc["holdout"]["fraction"]
    kw.update(doc.get("split", {}))
    return RunConfig(**kw)


def load_config(path: str | Path | None, **overrides) -> RunConfig:
    """Read and resolve a config file; with no path, ``overrides`` must supply the seed."""
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigValidationError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigValidationError("config document must be a JSON object")
    return parse_config(doc, **overrides)
