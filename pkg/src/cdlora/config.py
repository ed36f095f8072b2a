"""Declarative run configuration with strict key checking.

One JSON document drives a whole pipeline run. Unknown keys anywhere in the
document fail before any compute; all defaults are materialized into the
effective config, which commands echo to stdout and write next to their
artifacts.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path


class ConfigError(ValueError):
    """Malformed run configuration."""


DEFAULTS = {
    "seed": 0,
    "schedule": {"N": 50, "beta_min": 1e-4, "beta_max": 0.05},
    "net": {
        "hidden": [128, 128, 128],
        "time_dim": 16,
        "guidance_dim": 8,
        "cond_dim": 8,
        "num_conditions": 8,
        "omega_ref": 10.0,
        "sigma_data": 0.5,
    },
    "teacher": {
        "steps": 20_000,
        "lr": 1e-3,
        "batch": 256,
        "p_uncond": 0.1,
        "optimizer": "adam",
        "lr_schedule": "constant",
        "checkpoint_every": 0,
    },
    "style": {
        "steps": 5_000,
        "lr": 1e-3,
        "batch": 256,
        "p_uncond": 0.1,
        "optimizer": "adam",
        "lr_schedule": "constant",
    },
    "distill": {
        "eta": 3e-4,
        "mu": 0.95,
        "k": 5,
        "guidance_mode": "fixed",
        "omega_fixed": 7.5,
        "omega_min": 2.0,
        "omega_max": 14.0,
        "distance": "l2",
        "huber_c": 0.01,
        "solver": "ddim",
        "steps": 10_000,
        "batch_size": 256,
        "optimizer": "adam",
        "lr_schedule": "constant",
        "checkpoint_every": 0,
    },
    "lora": {"rank": 8, "scale": 1.0, "targets": None},
    "sample": {"steps": 4, "omega": 7.5, "count": 2000, "sampler": "lcm"},
    "combine": {"lambda1": 0.8, "lambda2": 1.0},
    "dataset": {"kind": "ring8", "count": 8192, "params": {}},
}

# dataset.params is generator-specific and validated by the generator itself
_FREE_SUBTREES = {("dataset", "params")}


def _merge(base: dict, override: dict, path: tuple) -> dict:
    out = dict(base)
    for key, value in override.items():
        if key not in base:
            dotted = ".".join(path + (key,))
            raise ConfigError(f"unknown config key {dotted!r}")
        if isinstance(base[key], dict) and path + (key,) not in _FREE_SUBTREES:
            if not isinstance(value, dict):
                raise ConfigError(f"config key {'.'.join(path + (key,))!r} must be a section")
            out[key] = _merge(base[key], value, path + (key,))
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(source=None, overrides: dict | None = None) -> dict:
    """Materialize the effective config from a JSON file/dict plus overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if source is not None:
        if isinstance(source, (str, Path)):
            with open(source) as fh:
                try:
                    source = json.load(fh)
                except json.JSONDecodeError as err:
                    raise ConfigError(f"config is not valid JSON: {err}") from err
        if not isinstance(source, dict):
            raise ConfigError("config document must be a JSON object")
        cfg = _merge(cfg, source, ())
    if overrides:
        cfg = _merge(cfg, overrides, ())
    return cfg


def effective_json(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True)
