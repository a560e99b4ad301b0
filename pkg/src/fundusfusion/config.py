"""Run configuration: JSON schema, defaults and resolution into typed objects."""

from __future__ import annotations

import copy
import json
from pathlib import Path

import jsonschema

from .cohort import IMAGENET_MEAN, IMAGENET_STD, AugmentConfig, PreprocessConfig, SignalConfig
from .fusion import HEAD_KINDS, STRATEGIES, FusionSpec
from .paths import BACKBONES, EncoderConfig, PathConfig
from .training import SELECTION_METRICS, SweepGrid, TrainConfig


class ConfigError(ValueError):
    """The run configuration is invalid; the message names the field."""


DEFAULTS: dict = {
    "data": {
        "manifest": None,
        "check_files": True,
        "synthetic": {"n_patients": 400, "seed": 0, "signal": {}},
    },
    "split": {"ratios": [0.6, 0.2, 0.2], "seed": 0},
    "preprocess": {"image_size": 512, "channel_mean": list(IMAGENET_MEAN),
                   "channel_std": list(IMAGENET_STD)},
    "augment": {"max_rotation_degrees": 360.0, "hflip_probability": 0.5,
                "blur_kernel": 3, "blur_probability": 0.5, "blur_sigma": None},
    "encoder": {"backbone": "toy-conv", "fundus_feature_dim": 8,
                "head_learning_rate": 1e-3, "backbone_learning_rate": 1e-4,
                "weights_path": None, "toy_channels": [8, 16, 32], "vit": {}},
    "paths": {"demographic_layers": 2, "demographic_standalone_layers": 4,
              "demographic_feature_dim": 32, "fusion_layers": 4, "hidden_width": 64,
              "dropout_rate": 0.2, "negative_slope": 0.01},
    "train": {"batch_size": 16, "epochs": 50, "seed": 0, "selection_metric": "auc",
              "weight_decay": 1e-4, "betas": [0.9, 0.999], "lr_min": 0.0,
              "augment_validation": False, "threshold": 0.5, "eval_batch_size": 64,
              "keep_all_checkpoints": False},
    "models": {
        "fundus": {"strategy": "unimodal_fundus"},
        "demographic": {"strategy": "unimodal_demographic", "train": {"epochs": 250}},
        "intermediate": {"strategy": "intermediate"},
    },
    "sweep": {"model": "intermediate", "epochs": 25,
              "head_learning_rates": [1e-2, 5e-2, 1e-3, 5e-3],
              "backbone_learning_rates": [1e-4, 5e-4, 1e-5, 5e-5, 1e-6, 5e-6],
              "feature_dims": None, "image_sizes": None,
              "matrix": ["fundus_feature_dim", "head_learning_rate"]},
    "eval": {"B": 10000, "seed": 0, "threshold": 0.5, "level": 0.95, "unit": "image",
             "subset": "test", "metric": "f1"},
    "explain": {"k": 8, "seed": 0, "colormap": "jet", "alpha": 0.4},
}

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_int1 = {"type": "integer", "minimum": 1}
_prob = {"type": "number", "minimum": 0, "maximum": 1}
_lrs = {"type": "array", "items": _pos, "minItems": 1}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False,
            "required": list(required)}


_MODEL_OVERRIDES = {
    "strategy": {"enum": list(STRATEGIES)},
    "head_kind": {"enum": list(HEAD_KINDS) + ["gbt", "svm", None]},
    "prerequisites": {"type": "object", "additionalProperties": {"type": "string"}},
    "head_grid": {"type": ["object", "null"]},
    "head_epochs": _int1,
    "seed": {"type": "integer"},
    "encoder": {"type": "object"},
    "paths": {"type": "object"},
    "train": {"type": "object"},
}

SCHEMA = _obj({
    "data": _obj({
        "manifest": {"type": ["string", "null"]},
        "check_files": {"type": "boolean"},
        "synthetic": _obj({"n_patients": {"type": "integer", "minimum": 2},
                           "seed": {"type": "integer"}, "signal": {"type": "object"}}),
    }),
    "split": _obj({"ratios": {"type": "array", "items": _num, "minItems": 3, "maxItems": 3},
                   "seed": {"type": "integer"}}),
    "preprocess": _obj({"image_size": _int1,
                        "channel_mean": {"type": "array", "items": _num, "minItems": 3, "maxItems": 3},
                        "channel_std": {"type": "array", "items": _pos, "minItems": 3, "maxItems": 3}}),
    "augment": _obj({"max_rotation_degrees": {"type": "number", "minimum": 0},
                     "hflip_probability": _prob, "blur_kernel": _int1,
                     "blur_probability": _prob, "blur_sigma": {"type": ["number", "null"]}}),
    "encoder": _obj({"backbone": {"enum": list(BACKBONES)},
                     "fundus_feature_dim": {"type": ["integer", "null"], "minimum": 1},
                     "head_learning_rate": _pos, "backbone_learning_rate": _pos,
                     "weights_path": {"type": ["string", "null"]},
                     "toy_channels": {"type": "array", "items": _int1, "minItems": 1},
                     "vit": {"type": "object"}}),
    "paths": _obj({"demographic_layers": _int1, "demographic_standalone_layers": _int1,
                   "demographic_feature_dim": _int1, "fusion_layers": _int1, "hidden_width": _int1,
                   "dropout_rate": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                   "negative_slope": _num}),
    "train": _obj({"batch_size": _int1, "epochs": _int1, "seed": {"type": "integer"},
                   "selection_metric": {"enum": list(SELECTION_METRICS)},
                   "weight_decay": {"type": "number", "minimum": 0},
                   "betas": {"type": "array", "items": _prob, "minItems": 2, "maxItems": 2},
                   "lr_min": {"type": "number", "minimum": 0},
                   "augment_validation": {"type": "boolean"}, "threshold": _prob,
                   "eval_batch_size": _int1, "keep_all_checkpoints": {"type": "boolean"}}),
    "models": {"type": "object", "minProperties": 1,
               "additionalProperties": _obj(_MODEL_OVERRIDES, required=["strategy"])},
    "sweep": _obj({"model": {"type": "string"}, "epochs": _int1,
                   "head_learning_rates": _lrs, "backbone_learning_rates": _lrs,
                   "feature_dims": {"type": ["array", "null"], "minItems": 1,
                                    "items": {"type": ["integer", "null"], "minimum": 1}},
                   "image_sizes": {"type": ["array", "null"], "items": _int1, "minItems": 1},
                   "matrix": {"type": "array", "items": {"type": "string"},
                              "minItems": 2, "maxItems": 2}}),
    "eval": _obj({"B": _int1, "seed": {"type": "integer"},
                  "threshold": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                  "level": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                  "unit": {"enum": ["image", "patient"]},
                  "subset": {"enum": ["train", "validation", "test"]},
                  "metric": {"enum": ["f1", "auc", "pr", "accuracy", "precision", "recall",
                                      "specificity"]}}),
    "explain": _obj({"k": _int1, "seed": {"type": "integer"}, "colormap": {"type": "string"},
                     "alpha": _prob}),
})


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "models":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _field(error: jsonschema.ValidationError) -> str:
    return ".".join(str(p) for p in error.absolute_path) or "<root>"


def resolve(user: dict | None = None) -> dict:
    """Validate ``user`` against the schema and fill every default."""
    user = user or {}
    try:
        jsonschema.validate(user, SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"{_field(exc)}: {exc.message}") from None
    cfg = _merge(DEFAULTS, user)
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"{_field(exc)}: {exc.message}") from None
    _check_semantics(cfg)
    return cfg


def _check_semantics(cfg: dict) -> None:
    from .cohort import validate_ratios

    try:
        validate_ratios(cfg["split"]["ratios"])
    except ValueError as exc:
        raise ConfigError(f"split.{exc}") from None
    try:
        AugmentConfig(**cfg["augment"])
        SignalConfig(**cfg["data"]["synthetic"]["signal"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"augment/data.synthetic.signal: {exc}") from None
    models = cfg["models"]
    for name, m in models.items():
        for role, ref in m.get("prerequisites", {}).items():
            if ref not in models:
                raise ConfigError(f"models.{name}.prerequisites.{role}: unknown model {ref!r}")
        try:
            EncoderConfig(**_merge(cfg["encoder"], m.get("encoder", {})))
            PathConfig(**_merge(cfg["paths"], m.get("paths", {})))
            train_config(cfg, name)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"models.{name}: {exc}") from None
    training_order(cfg)  # raises on prerequisite cycles
    if cfg["sweep"]["model"] not in models:
        raise ConfigError(f"sweep.model: unknown model {cfg['sweep']['model']!r}")


def load_config(path) -> dict:
    path = Path(path)
    try:
        user = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return resolve(user)


def training_order(cfg: dict) -> list[str]:
    """Model names with prerequisites before dependants."""
    models = cfg["models"]
    order, state = [], {}

    def visit(name, trail):
        if state.get(name) == "done":
            return
        if state.get(name) == "active":
            raise ConfigError(f"models: prerequisite cycle through {' -> '.join(trail + [name])}")
        state[name] = "active"
        for ref in models[name].get("prerequisites", {}).values():
            visit(ref, trail + [name])
        state[name] = "done"
        order.append(name)

    for name in models:
        visit(name, [])
    return order


def preprocess_config(cfg: dict, image_size: int | None = None) -> PreprocessConfig:
    p = cfg["preprocess"]
    return PreprocessConfig(image_size or p["image_size"], tuple(p["channel_mean"]),
                            tuple(p["channel_std"]))


def augment_config(cfg: dict) -> AugmentConfig:
    return AugmentConfig(**cfg["augment"])


def signal_config(cfg: dict) -> SignalConfig:
    return SignalConfig(**cfg["data"]["synthetic"]["signal"])


def train_config(cfg: dict, model_name: str | None = None, epochs: int | None = None) -> TrainConfig:
    t = dict(cfg["train"])
    if model_name is not None:
        t.update(cfg["models"][model_name].get("train", {}))
    if epochs is not None:
        t["epochs"] = epochs
    return TrainConfig(augment=augment_config(cfg), **t)


def fusion_spec(cfg: dict, name: str, prerequisites: dict | None = None) -> FusionSpec:
    m = cfg["models"][name]
    enc = _merge(cfg["encoder"], m.get("encoder", {}))
    enc["image_size"] = cfg["preprocess"]["image_size"]
    enc["toy_channels"] = tuple(enc["toy_channels"])
    return FusionSpec(
        strategy=m["strategy"], head_kind=m.get("head_kind"),
        encoder=EncoderConfig(**enc), paths=PathConfig(**_merge(cfg["paths"], m.get("paths", {}))),
        prerequisites=prerequisites or {}, head_grid=m.get("head_grid"),
        head_epochs=m.get("head_epochs", 250), seed=m.get("seed", cfg["train"]["seed"]))


def sweep_grid(cfg: dict) -> SweepGrid:
    s = cfg["sweep"]
    return SweepGrid(s["head_learning_rates"], s["backbone_learning_rates"],
                     s["feature_dims"], s["image_sizes"])
