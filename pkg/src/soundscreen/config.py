"""Run configuration: defaults < TOML file < SOUNDSCREEN_SEED < command-line flags."""

from __future__ import annotations

import copy
import json
import os
from typing import Any, Mapping

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "threads": 0,
    "audio.sample_rate_hz": 16000,
    "audio.min_duration_s": 1.0,
    "audio.clip_fraction_max": 0.05,
    "audio.silence_rms_floor": 1e-4,
    "features.window_ms": 25.0,
    "features.hop_ms": 10.0,
    "features.n_fft": 512,
    "features.n_mels": 64,
    "features.fmin_hz": 125.0,
    "features.fmax_hz": 7500.0,
    "features.log_floor": 1e-10,
    "features.t_frames": 96,
    "featurize.max_reject_fraction": 0.1,
    "net.conv1_filters": 8,
    "net.conv2_filters": 16,
    "net.hidden": 64,
    "net.coord_channel": True,
    "train.learning_rate": 1e-3,
    "train.batch_size": 32,
    "train.max_epochs": 50,
    "train.patience": 5,
    "train.beta1": 0.9,
    "train.beta2": 0.999,
    "train.epsilon": 1e-8,
    "split.ratios": [0.7, 0.1, 0.2],
    "split.match_axes": ["gender", "age_bin"],
    "split.tolerance_pp": 5.0,
    "split.min_test_size": 5,
    "eval.threshold": 0.5,
    "eval.n_resamples": 1000,
    "eval.cluster": True,
    "eval.axes": ["gender", "age_bin", "language"],
    "progression.k_min": 3,
    "progression.slope_eps": 0.02,
}

SEED_ENV = "SOUNDSCREEN_SEED"


def _flatten(obj: Mapping, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in obj.items():
        key = f"{prefix}{k}"
        if isinstance(v, Mapping):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(key: str, value: Any) -> Any:
    default = DEFAULTS[key]
    if isinstance(value, str) and not isinstance(default, str):
        try:
            value = json.loads(value)
        except json.JSONDecodeError:
            if isinstance(default, list):
                value = [v.strip() for v in value.split(",") if v.strip()]
            else:
                raise ConfigError(f"{key}: cannot parse {value!r}") from None
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list")
        return value
    return value


class RunConfig:
    def __init__(self, values: Mapping[str, Any] | None = None):
        self.values = copy.deepcopy(DEFAULTS)
        if values:
            self.update(values)

    def update(self, values: Mapping[str, Any]) -> None:
        for key, value in values.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            self.values[key] = _coerce(key, value)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def section(self, name: str) -> dict[str, Any]:
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self.values.items() if k.startswith(prefix)}

    def to_json(self) -> str:
        return json.dumps(self.values, indent=2, sort_keys=True) + "\n"

    @classmethod
    def load(cls, text: str | None = None, overrides: Mapping[str, Any] | None = None, env=None) -> "RunConfig":
        cfg = cls()
        if text:
            try:
                cfg.update(_flatten(tomllib.loads(text)))
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"config file: {exc}") from None
        env = os.environ if env is None else env
        if env.get(SEED_ENV):
            cfg.update({"seed": env[SEED_ENV]})
        if overrides:
            cfg.update(overrides)
        return cfg


def parse_assignments(items) -> dict[str, Any]:
    """``key=value`` strings from ``--set`` flags."""
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out
