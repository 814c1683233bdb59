"""Run configuration: flat dotted keys, precedence flags > file > defaults."""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping

from .model import Hyperparams
from .tasks import TaskSpec
from .training import ConfigError, DropoutRamp, EntropyScheduleSpec, TrainConfig

DEFAULTS: dict[str, Any] = {
    "model.num_layers": 2,
    "model.hidden_size": 64,
    "model.init_scale": 0.1,
    "model.stack": 1,
    "task.kind": "stretch_copy",
    "task.vocab_size": 8,
    "task.min_len": 5,
    "task.max_len": 10,
    "task.run_range": [1, 3],
    "task.noise": 0.1,
    "task.seed": 0,
    "task.train_size": 4000,
    "task.eval_size": 200,
    "data.train": None,
    "data.eval": None,
    "entropy.variant": "timit",
    "dropout.start": 5000,
    "dropout.end": 20000,
    "dropout.target": 0.0,
    **{f"train.{f.name}": f.default for f in fields(TrainConfig)
       if f.name not in ("entropy", "dropout")},
}
DEFAULTS["train.bucket_boundaries"] = []
ENTROPY_KEYS = ("base", "divisor", "scale", "offset", "hold_steps", "hold_value", "shift")


def _coerce(key: str, value: Any, default: Any) -> Any:
    if value is None or default is None:
        return value
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                return value.lower() in ("1", "true", "yes")
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, (list, tuple)):
            return [int(v) for v in value]
        return type(default)(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {value!r}") from None


@dataclass
class RunConfig:
    values: dict[str, Any]

    def __getitem__(self, key: str):
        return self.values[key]

    def task_spec(self, seed: int | None = None) -> TaskSpec:
        v = self.values
        try:
            return TaskSpec(v["task.kind"], v["task.vocab_size"], v["task.min_len"], v["task.max_len"],
                            tuple(v["task.run_range"]), v["task.noise"],
                            v["task.seed"] if seed is None else seed)
        except ValueError as err:
            raise ConfigError(f"task: {err}") from err

    def hyperparams(self, input_dim: int, vocab_size: int) -> Hyperparams:
        v = self.values
        try:
            return Hyperparams(v["model.num_layers"], v["model.hidden_size"],
                               input_dim * v["model.stack"], vocab_size,
                               v["dropout.target"], v["model.init_scale"])
        except ValueError as err:
            raise ConfigError(f"model: {err}") from err

    def entropy_spec(self) -> EntropyScheduleSpec:
        v = self.values
        variant = v["entropy.variant"]
        presets = {"timit": EntropyScheduleSpec.timit(), "wsj": EntropyScheduleSpec.wsj(),
                   "constant": EntropyScheduleSpec.constant(1.0)}
        if variant not in presets:
            raise ConfigError(f"entropy.variant: must be one of {sorted(presets)}, got {variant!r}")
        base = presets[variant]
        kw = {k: float(v[f"entropy.{k}"]) for k in ENTROPY_KEYS if f"entropy.{k}" in v}
        if "hold_steps" in kw:
            kw["hold_steps"] = int(kw["hold_steps"])
        return EntropyScheduleSpec(**{**base.__dict__, **kw})

    def train_config(self) -> TrainConfig:
        v = self.values
        kw = {f.name: v[f"train.{f.name}"] for f in fields(TrainConfig)
              if f.name not in ("entropy", "dropout")}
        kw["bucket_boundaries"] = tuple(kw["bucket_boundaries"])
        cfg = TrainConfig(entropy=self.entropy_spec(),
                          dropout=DropoutRamp(v["dropout.start"], v["dropout.end"], v["dropout.target"]),
                          **kw)
        cfg.validate()
        return cfg

    def to_json(self) -> str:
        return json.dumps(self.values, indent=2, sort_keys=True)


def load_config(path=None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    values = dict(DEFAULTS)
    layers: list[Mapping[str, Any]] = []
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err}") from err
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: invalid JSON ({err})") from err
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object of dotted keys")
        layers.append(raw)
    if overrides:
        layers.append({k: v for k, v in overrides.items() if v is not None})
    for layer in layers:
        for key, value in layer.items():
            entropy_param = key.startswith("entropy.") and key[len("entropy."):] in ENTROPY_KEYS
            if key not in DEFAULTS and not entropy_param:
                raise ConfigError(f"{key}: unknown configuration key")
            values[key] = _coerce(key, value, DEFAULTS.get(key, 0.0))
    cfg = RunConfig(values)
    cfg.train_config()
    cfg.task_spec()
    if values["model.stack"] < 1:
        raise ConfigError("model.stack: must be >= 1")
    return cfg
