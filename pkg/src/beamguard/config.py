"""Run configuration: one JSON document, one section per component.

Precedence is CLI flags > file > defaults.  Unknown sections or keys are
rejected before any work starts.
"""
from __future__ import annotations

import copy
import json
import math
from pathlib import Path

from ._util import stable_hash


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, dict] = {
    "dataset": {"n": 4000, "scenarios": ["single", "sparse", "dense", "mixed"],
                "fractions": [0.7, 0.1, 0.2], "num_bins": 8},
    "codebook": {"num_antennas": 16, "num_beams": 16},
    "camera": {"image_width": 64, "image_height": 64, "horizontal_fov_deg": 90.0},
    "rate": {"symbol_power": 1.0, "noise_variance": 0.1, "num_subcarriers": 16},
    "channel": {"max_nlos": 2, "nlos_gain_ratio": 0.2, "los_gain": 1.0,
                "max_delay_s": 50e-9, "subcarrier_spacing_hz": 10e6},
    "model": {"variant": "mini_residual", "stage_channels": [16, 32, 64], "coord_channels": True},
    "frm": {"enabled": False, "bottleneck_channels": None, "depth": 3},
    "train": {"batch_size": 32, "epochs": 30, "learning_rate": 1e-3, "lr_decay_factor": 0.1,
              "plateau_patience": 3, "distill_temperature": 20.0, "distill_mix_weight": 0.5},
    "attack": {"num_bins": 8, "data_fraction": 0.5, "detector": "oracle", "selection": "uniform",
               "blob_tolerance": 0.05, "surrogate_variant": "mini_residual", "surrogate_epochs": 30,
               "surrogate_val_fraction": 0.1, "batch_size": 32, "epsilon": 0.04},
    "grid": {"epsilons": [0.02, 0.03, 0.04, 0.05], "sigmas": [0.01, 0.015, 0.02, 0.025],
             "topk": [1, 2, 3, 5]},
    "eval": {"noise_seeds": [0, 1, 2], "gamma_min_fraction": 0.5, "split": "test",
             "logit_epsilon": 0.05, "sigma_max": 0.05},
    "paths": {"data_dir": "data", "run_dir": "runs"},
    "seeds": {"dataset": 0, "train": 0, "attack": 0},
}

# keys whose value may be null
_NULLABLE = {("frm", "bottleneck_channels")}


def _check_type(section: str, key: str, value, default):
    if value is None:
        if (section, key) in _NULLABLE:
            return
        raise ConfigError(f"{section}.{key} may not be null")
    if default is None:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, (list, tuple))
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{section}.{key}: expected {type(default).__name__}, got {value!r}")


def merge(base: dict, override: dict, origin: str = "config") -> dict:
    out = copy.deepcopy(base)
    for section, values in override.items():
        if section not in DEFAULTS:
            raise ConfigError(f"{origin}: unknown section {section!r}")
        if not isinstance(values, dict):
            raise ConfigError(f"{origin}: section {section!r} must be a mapping")
        for key, value in values.items():
            if key not in DEFAULTS[section]:
                raise ConfigError(f"{origin}: unknown key {section}.{key}")
            _check_type(section, key, value, DEFAULTS[section][key])
            out[section][key] = list(value) if isinstance(value, tuple) else value
    return out


def _validate(cfg: dict) -> None:
    d = cfg["dataset"]
    if d["n"] < 1:
        raise ConfigError("dataset.n must be positive")
    if len(d["fractions"]) != 3 or abs(sum(d["fractions"]) - 1) > 1e-9:
        raise ConfigError("dataset.fractions must be three values summing to 1")
    if cfg["codebook"]["num_antennas"] < 1 or cfg["codebook"]["num_beams"] < 1:
        raise ConfigError("codebook sizes must be positive")
    if not 0 < cfg["attack"]["data_fraction"] <= 1:
        raise ConfigError("attack.data_fraction must lie in (0, 1]")
    if cfg["attack"]["num_bins"] < 2:
        raise ConfigError("attack.num_bins must be at least 2")
    if cfg["attack"]["detector"] not in ("oracle", "blob"):
        raise ConfigError("attack.detector must be 'oracle' or 'blob'")
    if cfg["model"]["variant"] not in ("mini_residual", "mini_plain"):
        raise ConfigError("model.variant must be 'mini_residual' or 'mini_plain'")
    if cfg["train"]["epochs"] < 0 or cfg["train"]["batch_size"] < 1:
        raise ConfigError("train.epochs must be >= 0 and train.batch_size >= 1")
    g = cfg["grid"]
    if len(g["epsilons"]) != len(g["sigmas"]):
        raise ConfigError("grid.epsilons and grid.sigmas must pair up by index")
    if max(g["topk"], default=1) > cfg["codebook"]["num_beams"]:
        raise ConfigError("grid.topk may not exceed the number of beams")


def build(overrides: dict | None = None, path: str | Path | None = None) -> dict:
    """Defaults, then the JSON file at ``path``, then ``overrides``."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} not found") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        cfg = merge(cfg, data, str(path))
    if overrides:
        cfg = merge(cfg, overrides, "command line")
    _validate(cfg)
    return cfg


def config_hash(cfg: dict, sections=None) -> str:
    sections = sorted(cfg) if sections is None else sections
    return stable_hash({s: cfg[s] for s in sections})

