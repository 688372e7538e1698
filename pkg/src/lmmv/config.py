"""RunConfig: one JSON document holding generator, model, training and
evaluation settings, validated against a schema before any work starts."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from jsonschema import Draft202012Validator

from .data.synth import SynthConfig
from .model import ModelConfig
from .trainer import TrainConfig

_PROB = {"type": "number", "minimum": 0, "exclusiveMaximum": 1}
_POS_INT = {"type": "integer", "minimum": 1}
_POS_NUM = {"type": "number", "exclusiveMinimum": 0}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required),
            "additionalProperties": False}


VIEW_SCHEMA = _obj({
    "name": {"type": "string", "minLength": 1},
    "kind": {"enum": ["tabular", "image"]},
    "schedule": {"type": ["array", "null"], "items": {"type": "integer", "minimum": 0}},
    "missing_prob": _PROB,
    "signal": {"type": "number"},
    "noise": {"type": "number", "minimum": 0},
    "n_continuous": {"type": "integer", "minimum": 0},
    "n_categorical": {"type": "integer", "minimum": 0},
    "image_size": {"type": "integer", "minimum": 4},
    "blobs": _POS_INT,
    "normalize": {"type": "boolean"},
}, required=("name", "kind"))

RUN_CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "lmmv RunConfig",
    **_obj({
        "synth": _obj({
            "n_patients": _POS_INT,
            "timepoints": _POS_INT,
            "class_count": {"type": "integer", "minimum": 2},
            "views": {"type": ["array", "null"], "items": VIEW_SCHEMA, "minItems": 1},
            "label_missing_prob": _PROB,
            "attribute_missing_prob": _PROB,
            "latent_dim": _POS_INT,
            "drift": {"type": "number", "minimum": 0},
            "noise": {"type": "number", "minimum": 0},
            "prevalence": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            "split": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1},
                      "minItems": 2, "maxItems": 2},
            "seed": {"type": "integer", "minimum": 0},
        }),
        "model": _obj({
            "d_model": _POS_INT,
            "heads": _POS_INT,
            "summarizer_layers": _POS_INT,
            "decoder_layers": _POS_INT,
            "image_widths": {"type": "array", "items": _POS_INT, "minItems": 1},
            "tabular_dim": _POS_INT,
            "tabular_layers": _POS_INT,
            "tabular_heads": _POS_INT,
            "penalty": {"type": "number", "maximum": -1e8},
        }),
        "train": _obj({
            "epochs": {"type": "integer", "minimum": 0},
            "batch_size": _POS_INT,
            "seed": {"type": "integer", "minimum": 0},
            "view_dropout": _PROB,
            "lr": _POS_NUM,
            "group_lr": {"type": "object", "additionalProperties": _POS_NUM},
            "weight_decay": {"type": "number", "minimum": 0},
            "betas": {"type": "array", "items": _PROB, "minItems": 2, "maxItems": 2},
            "eps": _POS_NUM,
            "warmup_frac": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            "initial_div": {"type": "number", "exclusiveMinimum": 1},
            "final_div": {"type": "number", "exclusiveMinimum": 1},
            "selection_metric": {"enum": ["ap", "roc", "macro_acc"]},
            "noise_augment": {"type": "number", "minimum": 0},
            "contrast_augment": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            "rotate_degrees": {"type": "number", "minimum": 0},
            "eval_batch_size": _POS_INT,
        }),
        "eval": _obj({
            "split": {"enum": ["train", "val", "test"]},
            "importance_split": {"enum": ["train", "val", "test"]},
            "windows": {"type": "array", "items": {"type": "string", "pattern": r"^\d+:\d+$"}},
            "subsets": {"type": "array", "items": {"type": "array", "items": {"type": "string"},
                                                   "minItems": 1}},
        }),
        "output_dir": {"type": "string"},
    }),
}


class ConfigError(ValueError):
    """Schema violations, each prefixed by its JSON path."""

    def __init__(self, problems: list[str]):
        super().__init__("invalid run config:\n  " + "\n  ".join(problems))
        self.problems = problems


def validate_config(doc) -> None:
    validator = Draft202012Validator(RUN_CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        problems = []
        for e in errors:
            path = ".".join(str(p) for p in e.absolute_path) or "<root>"
            problems.append(f"{path}: {e.message}")
        raise ConfigError(problems)


@dataclass
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: dict = field(default_factory=lambda: {"split": "test", "importance_split": "test"})
    output_dir: str | None = None

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        validate_config(doc)
        ev = {"split": "test", "importance_split": "test"}
        ev.update(doc.get("eval", {}))
        try:
            return cls(SynthConfig.from_dict(doc.get("synth", {})), ModelConfig(**doc.get("model", {})),
                       TrainConfig(**doc.get("train", {})), ev, doc.get("output_dir"))
        except ValueError as exc:  # cross-field checks the schema cannot express
            raise ConfigError([str(exc)]) from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError([f"<root>: not valid JSON ({exc})"]) from exc
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        out = {"synth": self.synth.to_dict(), "model": self.model.to_dict(),
               "train": self.train.to_dict(), "eval": dict(self.eval)}
        if self.output_dir is not None:
            out["output_dir"] = self.output_dir
        return out
