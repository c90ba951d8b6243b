"""Run configuration: a JSON document with model/train/data/modality
sections. Unknown keys are rejected with their full path; defaults mirror
the shipped training setup (lr 3e-5, warmup 0.03, 5 epochs, micro-batch 4,
accumulation 3, max sequence length 512).
"""

from __future__ import annotations

import json

from .cognitive import DecoderConfig
from .encoders import ModalityConfig
from .errors import ConfigError
from .training import TrainConfig

_DATA_DEFAULTS = {
    "captions": None,      # captions JSONL for dataset-build
    "train_path": None,    # examples JSONL for train/eval
    "out_dir": ".",
    "seed": 0,
    "mix": {"n_per_source": None},
}


def default_config() -> dict:
    return {"model": DecoderConfig().to_dict(),
            "train": TrainConfig().to_dict(),
            "modality": ModalityConfig().to_dict(),
            "data": json.loads(json.dumps(_DATA_DEFAULTS))}


def _merge(defaults: dict, user: dict, path: str = "") -> dict:
    out = dict(defaults)
    for key, value in user.items():
        here = f"{path}{key}"
        if key not in defaults:
            raise ConfigError(f"unknown config key: {here}")
        if isinstance(defaults[key], dict) and defaults[key]:
            if not isinstance(value, dict):
                raise ConfigError(f"config key {here} must be an object")
            out[key] = _merge(defaults[key], value, here + ".")
        else:
            out[key] = value
    return out


def validate_config(user: dict) -> dict:
    if not isinstance(user, dict):
        raise ConfigError("config root must be a JSON object")
    return _merge(default_config(), user)


def load_config(path: str | None, seed: int | None = None) -> dict:
    """Load and validate a config file; returns the merged plain dict plus
    constructed config objects under 'objects'."""
    if path is None:
        merged = default_config()
    else:
        try:
            with open(path, encoding="utf-8") as f:
                user = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        merged = validate_config(user)
    if seed is not None:
        merged["train"]["seed"] = seed
        merged["data"]["seed"] = seed
    try:
        objects = {"model": DecoderConfig.from_dict(merged["model"]),
                   "train": TrainConfig.from_dict(merged["train"]),
                   "modality": ModalityConfig.from_dict(merged["modality"])}
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    merged["objects"] = objects
    return merged
