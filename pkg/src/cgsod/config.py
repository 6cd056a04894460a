"""Run configuration: YAML file merged with command-line overrides.

Unknown keys are rejected with their full path; dataset paths validate
before any compute starts.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

import yaml

from .backbone import StageConfig
from .errors import ConfigError

DEFAULTS: dict = {
    "seed": 0,
    "out_dir": "runs/default",
    "model": {
        "stages": [
            {"embed_dim": 8, "depth": 2, "heads": 1, "reduction": 64, "patch_size": 7, "stride": 4},
            {"embed_dim": 16, "depth": 2, "heads": 2, "reduction": 16, "patch_size": 3, "stride": 2},
            {"embed_dim": 32, "depth": 2, "heads": 4, "reduction": 4, "patch_size": 3, "stride": 2},
            {"embed_dim": 64, "depth": 2, "heads": 8, "reduction": 1, "patch_size": 3, "stride": 2},
        ],
        "decoder_dim": 8,
        "guidance": [True, True, True, True],
        "joint_guidance": False,
        "guidance_norm": "max",
    },
    "caption": {
        "grid_side": 7,
        "feature_dim": 32,
        "model_dim": 32,
        "heads": 2,
        "layers": 2,
        "max_len": 12,
        "attention_layer": -1,
        "vocab_path": None,
    },
    "train": {
        "lr": 2.0e-3,
        "pretrain_epochs": 0,
        "finetune_epochs": 10,
        "batch_size": 4,
        "image_size": 64,
        "augment": False,
        "caption_steps": 300,
        "caption_lr": 1.0e-2,
        "log_every": 1,
        "lr_schedule": "constant",
    },
    "metrics": {
        "beta_sq": 0.3,
        "alpha": 0.5,
        "thresholds": 256,
        "eps": 1.0e-8,
        "adaptive_f": False,
        "pooled_curves": False,
    },
    "data": {
        "pretrain_dir": None,
        "finetune_dir": None,
        "val_dir": None,
    },
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> dict:
    """DEFAULTS <- YAML file <- dotted key=value overrides (last wins)."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            loaded = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {path} is not valid YAML: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must hold a mapping")
        cfg = _merge(cfg, loaded)
    for item in overrides or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        node: dict = {}
        leaf = node
        parts = key.split(".")
        for part in parts[:-1]:
            leaf[part] = {}
            leaf = leaf[part]
        leaf[parts[-1]] = yaml.safe_load(raw)
        cfg = _merge(cfg, node)
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    train = cfg["train"]
    if train["image_size"] % 32 != 0:
        raise ConfigError(f"train.image_size {train['image_size']} not divisible by 32")
    for key in ("lr", "batch_size"):
        if train[key] <= 0:
            raise ConfigError(f"train.{key} must be positive")
    for key in ("pretrain_epochs", "finetune_epochs"):
        if train[key] < 0:
            raise ConfigError(f"train.{key} must be nonnegative")
    if len(cfg["model"]["stages"]) != 4:
        raise ConfigError("model.stages must list exactly 4 stages")
    if len(cfg["model"]["guidance"]) != 4:
        raise ConfigError("model.guidance must list exactly 4 flags")
    stage_configs(cfg)  # raises ConfigError on bad stage geometry


def stage_configs(cfg: dict) -> list[StageConfig]:
    out = []
    for i, stage in enumerate(cfg["model"]["stages"]):
        try:
            out.append(StageConfig(**stage))
        except TypeError as exc:
            raise ConfigError(f"model.stages[{i}]: {exc}") from None
    return out


def caption_kwargs(cfg: dict) -> dict:
    cap = cfg["caption"]
    return {
        "grid_side": cap["grid_side"],
        "feature_dim": cap["feature_dim"],
        "model_dim": cap["model_dim"],
        "heads": cap["heads"],
        "layers": cap["layers"],
        "max_len": cap["max_len"],
        "attention_layer": cap["attention_layer"],
    }


def require_dir(cfg: dict, dotted: str) -> Path:
    node = cfg
    for part in dotted.split("."):
        node = node[part]
    if node is None:
        raise ConfigError(f"{dotted} is required but not set")
    path = Path(node)
    if not path.is_dir():
        raise ConfigError(f"{dotted}: {path} is not a directory")
    return path


def config_digest(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:16]
