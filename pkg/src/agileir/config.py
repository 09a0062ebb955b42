"""Run configuration: INI-style files plus command-line overrides.

Schema (all keys optional; defaults shown)::

    [model]
    preset = agileir          ; agileir | agileir_plus | swinir_light_ref
    scale = 2                 ; 2 | 3 | 4
    ; .. plus any ModelConfig field (channels, num_blocks, layers_per_block,
    ;    groups, qk_dim, window, mlp_ratio, cascade, qkv_bias) to override
    ;    the preset value

    [train]
    iters = 2000
    batch = 4
    patch_lr = 48
    lr0 = 2e-4
    beta1 = 0.9
    beta2 = 0.9
    eps = 1e-8
    weight_decay = 0.0
    charb_eps = 1e-3
    grad_clip = 0.0           ; 0 disables clipping
    seed = 0
    eval_every = 0            ; 0 disables periodic eval
    milestones =              ; comma-separated iterations; empty = 1/2,3/4,7/8

    [paths]
    data_dir =
    out_dir = runs/out
    init_ckpt =               ; optional warm start (x2 -> x4 reuse)

Command-line ``--set section.key=value`` overrides win over file values.
Unknown sections or keys are errors, not warnings.
"""

from __future__ import annotations

import configparser
import dataclasses
from typing import Any

from .model import ModelConfig, PRESETS, preset
from .training import TrainConfig


class ConfigError(ValueError):
    """Bad configuration: unknown key, bad type, invalid value."""


def _to_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _to_milestones(s: str) -> tuple[int, ...] | None:
    s = s.strip()
    if not s:
        return None
    return tuple(int(x) for x in s.split(","))


_MODEL_FIELDS = {f.name: f.type for f in dataclasses.fields(ModelConfig)}

SCHEMA: dict[str, dict[str, Any]] = {
    "model": {"preset": str, "scale": int, "channels": int, "num_blocks": int,
              "layers_per_block": int, "groups": int, "qk_dim": int,
              "window": int, "mlp_ratio": float, "cascade": _to_bool,
              "qkv_bias": _to_bool},
    "train": {"iters": int, "batch": int, "patch_lr": int, "lr0": float,
              "beta1": float, "beta2": float, "eps": float,
              "weight_decay": float, "charb_eps": float, "grad_clip": float,
              "seed": int, "eval_every": int, "milestones": _to_milestones},
    "paths": {"data_dir": str, "out_dir": str, "init_ckpt": str},
}

DEFAULTS: dict[str, Any] = {
    ("model", "preset"): "agileir",
    ("model", "scale"): 2,
    ("paths", "out_dir"): "runs/out",
}


def parse_value(section: str, key: str, raw: str) -> Any:
    if section not in SCHEMA:
        raise ConfigError(f"unknown config section '{section}'")
    if key not in SCHEMA[section]:
        raise ConfigError(f"unknown config key '{section}.{key}'")
    conv = SCHEMA[section][key]
    try:
        return conv(raw)
    except ValueError as e:
        raise ConfigError(f"bad value for {section}.{key}: {e}") from e


def load_file(path: str) -> dict[tuple[str, str], Any]:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")
    values: dict[tuple[str, str], Any] = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            values[(section, key)] = parse_value(section, key, raw)
    return values


def apply_overrides(values: dict[tuple[str, str], Any], overrides: list[str]):
    """Apply ``section.key=value`` strings (later entries win)."""
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        section, key = dotted.split(".", 1)
        values[(section, key)] = parse_value(section, key, raw)


def resolve(config_path: str | None, overrides: list[str]) -> dict[tuple[str, str], Any]:
    values = dict(DEFAULTS)
    if config_path:
        values.update(load_file(config_path))
    apply_overrides(values, overrides)
    return values


def model_config(values: dict[tuple[str, str], Any]) -> ModelConfig:
    name = values.get(("model", "preset"), "agileir")
    if name not in PRESETS:
        raise ConfigError(f"unknown preset '{name}' (choose from {', '.join(PRESETS)})")
    cfg = preset(name, scale=values.get(("model", "scale"), 2))
    explicit = {key: values[("model", key)] for key in _MODEL_FIELDS
                if ("model", key) in values and key != "scale"}
    if explicit:
        try:
            cfg = dataclasses.replace(cfg, **explicit)
        except ValueError as e:
            raise ConfigError(str(e)) from e
    return cfg


def train_config(values: dict[tuple[str, str], Any]) -> TrainConfig:
    kwargs = {key: val for (section, key), val in values.items()
              if section == "train"}
    try:
        return TrainConfig(**kwargs)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def echo(values: dict[tuple[str, str], Any]) -> str:
    """Stable one-line summary of the effective config (for log headers)."""
    parts = [f"{s}.{k}={v}" for (s, k), v in sorted(values.items())]
    return " ".join(parts)
