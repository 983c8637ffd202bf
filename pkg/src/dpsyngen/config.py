"""Experiment configuration: one JSON document, validated against SCHEMA.

Precedence is defaults < config file < command-line flags. The resolved
document is written next to every run's outputs.
"""

import json
import math
import os
from dataclasses import asdict, dataclass, field, fields

import jsonschema

from .errors import ConfigurationError

OUT_ENV = "DPSYNGEN_OUT"
DEFAULT_OUT = "runs"

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "dpsyngen experiment",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "variant": {"enum": ["coarse", "cleaning", "finetune", "baseline"]},
        "thresholds": {"oneOf": [
            {"const": "auto"},
            {"type": "array", "items": {"type": ["number", "string"]}, "minItems": 2, "maxItems": 2},
        ]},
        "dataset": {"type": "string", "minLength": 1},
        "image_size": {"type": "integer", "minimum": 4},
        "n_train": {"type": "integer", "minimum": 1},
        "private": {"type": "boolean"},
        "epsilon": {"type": "number", "exclusiveMinimum": 0},
        "delta": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "clip": {"type": "number", "exclusiveMinimum": 0},
        "q": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "noise_multiplier": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "multiplicity": {"type": "integer", "minimum": 1},
        "epochs": {"type": "number", "exclusiveMinimum": 0},
        "epoch_scale": {"type": "number", "exclusiveMinimum": 0},
        "synthetic_kind": {"enum": ["dead-leaves", "salt-pepper"]},
        "synthetic_n": {"type": "integer", "minimum": 1},
        "synthetic_epochs": {"type": "integer", "minimum": 1},
        "hidden": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "batch_size": {"type": "integer", "minimum": 1},
        "conditional": {"type": "boolean"},
        "sampler_steps": {"type": "integer", "minimum": 2},
        "n_samples": {"type": "integer", "minimum": 0},
        "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
        "out": {"type": ["string", "null"]},
    },
}


@dataclass
class ExperimentConfig:
    variant: str = "coarse"
    thresholds: object = "auto"
    dataset: str = "builtin:bars16"
    image_size: int = 16
    n_train: int = 2000
    private: bool = True
    epsilon: float = 10.0
    delta: float = 1e-5
    clip: float = 1.0
    q: float = 0.1
    noise_multiplier: float = None
    multiplicity: int = 16
    epochs: float = 250
    epoch_scale: float = 0.02
    synthetic_kind: str = "dead-leaves"
    synthetic_n: int = 2000
    synthetic_epochs: int = 20
    hidden: list = field(default_factory=lambda: [128, 128])
    lr: float = 3e-4
    batch_size: int = 128
    conditional: bool = False
    sampler_steps: int = 64
    n_samples: int = 64
    seeds: list = field(default_factory=lambda: [0])
    out: str = None

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]

    def to_json(self):
        doc = asdict(self)
        if isinstance(doc["thresholds"], (list, tuple)):
            doc["thresholds"] = [_encode_tau(t) for t in doc["thresholds"]]
        return doc

    @property
    def private_epochs(self):
        """Epochs after the desk-scale multiplier."""
        return self.epochs * self.epoch_scale

    def tau_pair(self):
        if self.thresholds == "auto":
            return None
        return tuple(_decode_tau(t) for t in self.thresholds)


def _encode_tau(t):
    return "inf" if isinstance(t, float) and math.isinf(t) and t > 0 else t


def _decode_tau(t):
    if isinstance(t, str):
        if t.strip().lower() in ("inf", "+inf", "infinity"):
            return math.inf
        raise ConfigurationError(f"threshold {t!r} is neither a number nor 'inf'")
    return float(t)


def validate(doc):
    try:
        jsonschema.validate(doc, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigurationError(f"config {where}: {exc.message}") from None


def resolve(config_path=None, overrides=None):
    """Merge defaults, an optional JSON file and non-None overrides, then validate."""
    doc = ExperimentConfig().to_json()
    if config_path:
        try:
            with open(config_path, encoding="utf-8") as f:
                loaded = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{config_path}: invalid JSON ({exc.msg})") from None
        if not isinstance(loaded, dict):
            raise ConfigurationError(f"{config_path}: top level must be an object")
        doc.update(loaded)
    for k, v in (overrides or {}).items():
        if v is not None:
            doc[k] = list(v) if isinstance(v, tuple) else v
    validate(doc)
    cfg = ExperimentConfig(**doc)
    cfg.tau_pair()
    return cfg


def output_dir(cfg_out=None):
    path = cfg_out or os.environ.get(OUT_ENV) or DEFAULT_OUT
    os.makedirs(path, exist_ok=True)
    return path


def write_resolved(cfg, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(cfg.to_json(), f, indent=2, sort_keys=True)
        f.write("\n")
    return path
