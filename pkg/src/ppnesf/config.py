"""Experiment configuration: defaults, JSON-schema validation and run directories."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import time
from pathlib import Path

import jsonschema

from .localization import RefineConfig
from .privacy import PrivacyConfig
from .scenes import SceneSpec, TrajectorySpec
from .training import TrainConfig

# Desk profile: sized for a single CPU core. The dataclass defaults keep the
# full-scale values; these override them for the shipped recipe.
DEFAULT_CONFIG = {
    "seed": 0,
    "scene": {
        "spec": {"n_primitives": 8, "n_classes": 8, "resolution": 64, "density": 150.0, "wall_voxels": 2},
        "trajectory": {"width": 64, "height": 64, "fov_deg": 60.0},
        "n_views": 100,
    },
    "train": {
        "rays_per_step": 1024,
        "total_steps": 1500,
        "n_samples": 32,
        "n_importance": 16,
        # Short runs need a gentler decay than 1e-2 -> 1e-4 to fit geometry at all.
        "lr_field": [1e-2, 1e-3],
        "lr_encoder": [1e-3, 3e-4],
    },
    "localize": {
        "refine": {"rays_per_iter": 256},
        "n_queries": 20,
        "init": "perturbed",
        "max_rotation_deg": 10.0,
        "max_translation": 0.1,
        "thresholds": [[0.01, 1.0], [0.05, 5.0]],
    },
    "privacy": {
        "seeds": [0, 1, 2],
        "variants": ["rgb", "rgb+seg", "ppnesf"],
        "scene_offset": 100,
        "n_views": 20,
        "trajectory": {"width": 32, "height": 32},
        "train": {"rays_per_step": 128, "total_steps": 300, "lr_field": [5e-2, 5e-3], "mlp_lr_scale": 0.02,
                  "rgb_weight": 10.0, "n_samples": 24, "n_importance": 8},
        "decoder": {"width": 32, "epochs": 35, "iters_per_epoch": 25, "views_per_scene": 16},
        "attack_views": 10,
    },
}


def _dataclass_schema(cls, exclude=()) -> dict:
    props = {}
    for f in dataclasses.fields(cls):
        if f.name in exclude:
            continue
        props[f.name] = {}
    return {"type": "object", "properties": props, "additionalProperties": False}


def _number_list(min_items=1):
    return {"type": "array", "items": {"type": "number"}, "minItems": min_items}


SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "scene": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "spec": _dataclass_schema(SceneSpec),
                "trajectory": _dataclass_schema(TrajectorySpec),
                "n_views": {"type": "integer", "minimum": 1},
            },
        },
        "train": _dataclass_schema(TrainConfig),
        "localize": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "refine": _dataclass_schema(RefineConfig),
                "n_queries": {"type": "integer", "minimum": 1},
                "init": {"enum": ["perturbed", "retrieval", "ground_truth"]},
                "max_rotation_deg": {"type": "number", "minimum": 0},
                "max_translation": {"type": "number", "minimum": 0},
                "thresholds": {"type": "array", "items": _number_list(2)},
            },
        },
        "privacy": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "seeds": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
                "variants": {"type": "array", "items": {"enum": ["rgb", "rgb+seg", "ppnesf"]}, "minItems": 1},
                "scene_offset": {"type": "integer", "minimum": 0},
                "n_views": {"type": "integer", "minimum": 5},
                "trajectory": _dataclass_schema(TrajectorySpec),
                "train": _dataclass_schema(TrainConfig),
                "decoder": _dataclass_schema(PrivacyConfig),
                "attack_views": {"type": "integer", "minimum": 1},
            },
        },
    },
}


class ConfigError(ValueError):
    def __init__(self, pointer: str, message: str):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer or "/"
        self.detail = message


def merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate(cfg: dict) -> dict:
    """Schema-check ``cfg``; raises ConfigError carrying a JSON pointer to the first problem."""
    errors = sorted(jsonschema.Draft202012Validator(SCHEMA).iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        pointer = "".join(f"/{p}" for p in err.absolute_path)
        raise ConfigError(pointer, err.message)
    return cfg


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the user's JSON file, then explicit overrides; validated after each merge."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("", f"invalid JSON: {exc}") from exc
        validate(user)
        cfg = merge(cfg, user)
    if overrides:
        cfg = merge(cfg, overrides)
    return validate(cfg)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:10]


def run_dir(root, cfg: dict, command: str) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    path = Path(root) / f"{command}-{config_hash(cfg)}-{stamp}"
    path.mkdir(parents=True, exist_ok=True)
    (path / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True))
    return path


def train_config(cfg: dict, block: dict | None = None, **extra) -> TrainConfig:
    d = {**(cfg["train"] if block is None else block), **extra}
    d.setdefault("seed", cfg["seed"])
    return TrainConfig.from_dict(d)


def scene_specs(cfg: dict) -> tuple[SceneSpec, TrajectorySpec]:
    return SceneSpec(**cfg["scene"]["spec"]), TrajectorySpec(**cfg["scene"]["trajectory"])
