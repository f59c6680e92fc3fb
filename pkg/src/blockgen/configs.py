"""Run configuration: JSON schema, strict validation, overrides.

Every section mirrors a module's config. Unknown keys are rejected at
every nesting level (silent config typos are the main reproducibility
hazard), and the fully resolved config is echoed into every artifact.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .errors import ConfigError
from .grammar import GrammarConfig
from .sets import DEFAULT_MIX

DEFAULTS = {
    "experiment_id": "default",
    "seed": 0,
    "output_dir": "out",
    "grammar": GrammarConfig().to_json_dict(),
    "diffusion": {
        "total_steps": 200,
        "threshold_step": 100,
        "w_max": 1.0,
        "beta_start": 1e-4,
        "beta_end": 0.02,
        "height": 32,
        "width": 32,
        "channels": [16, 32, 64],
        "attn_dim": 64,
        "text_dim": 64,
        "time_dim": 64,
        "patch_size": 4,
        "p_global_only": 0.25,
    },
    "train_diffusion": {
        "n_scenes": 240,
        "epochs": 80,
        "batch_size": 8,
        "lr": 2e-3,
        "resume_from": None,
    },
    "encoder": {
        "embed_dim": 64,
        "height": 32,
        "width": 32,
        "image_channels": [16, 32, 64],
        "text_dim": 64,
        "text_layers": 2,
        "init_seed": 0,
    },
    "adapters": {
        "rank": 16,
        "alpha": 16.0,
        "target_layers": ["all_linear"],
    },
    "loss": {
        "mode": "sets+neg",
        "init_tau": 2.0,
        "init_bias": 0.0,
    },
    "dataset": {
        "n_sets": 200,
        "m": 5,
        "mix": dict(DEFAULT_MIX),
        "stitched_fraction": 1.0,
        "denoiser_checkpoint": None,
        "condition": "combined",
        "init": "collage",
        "num_steps": None,
        "filter_scorer": "none",  # none | oracle | encoder
        "filter_percentile": 10.0,
        "filter_encoder_checkpoint": None,
    },
    "finetune": {
        "epochs": 10,
        "lr": 1e-2,
        "sets_per_batch": 8,
        "dataset_dir": None,
    },
    "benchmark": {
        "n_per_kind": 150,
        "dir": None,
    },
    "ablation": {
        "seeds": [0, 1, 2],
        "cells": [],
    },
}

# sections whose sub-keys are free-form (validated downstream)
_FREE_FORM = {("grammar",), ("dataset", "mix")}


def _validate(data, defaults, path=()):
    if path in _FREE_FORM:
        return
    if not isinstance(data, dict):
        raise ConfigError(f"{'.'.join(path) or 'config'} must be an object")
    unknown = set(data) - set(defaults)
    if unknown:
        where = ".".join(path) or "config"
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    for key, value in data.items():
        if isinstance(defaults[key], dict) and isinstance(value, dict):
            _validate(value, defaults[key], path + (key,))


def _merge(base, override):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path=None, overrides=None, seed=None, output_dir=None) -> dict:
    """Resolved run config: defaults <- file <- --override flags <- flags."""
    config = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as err:
            raise ConfigError(f"config is not valid JSON: {err}")
        _validate(data, DEFAULTS)
        config = _merge(config, data)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must be key.path=value, got {item!r}")
        key_path, _, raw = item.partition("=")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = config
        parts = key_path.split(".")
        ref = DEFAULTS
        for part in parts[:-1]:
            if not isinstance(ref, dict) or (part not in ref and tuple(parts[:parts.index(part) + 1]) not in _FREE_FORM):
                raise ConfigError(f"unknown override path {key_path!r}")
            node = node.setdefault(part, {})
            ref = ref.get(part, {})
        leaf = parts[-1]
        if isinstance(ref, dict) and leaf not in ref and tuple(parts[:-1]) not in _FREE_FORM:
            raise ConfigError(f"unknown override path {key_path!r}")
        node[leaf] = value
    if seed is not None:
        config["seed"] = int(seed)
    if output_dir is not None:
        config["output_dir"] = str(output_dir)
    _validate(config, DEFAULTS)
    return config


def grammar_from(config) -> GrammarConfig:
    return GrammarConfig.from_json_dict(config["grammar"])
