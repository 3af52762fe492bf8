"""Key-value config files for datasets and training runs.

One ``key = value`` pair per line; blank lines and ``#`` comments are
ignored.  Training files accept the :class:`TrainConfig` field names plus

    seed, alpha_r, alpha_g, gate_p, temperature, model.<ModelConfig field>

for example::

    steps = 2000
    lr_max = 3e-3
    alpha_g = 0.5
    model.k_chorus = 16

Dataset files accept the :class:`DatasetSpec` field names.
"""
from __future__ import annotations

import dataclasses
import os
from typing import Union

from .data import DatasetSpec
from .model import ModelConfig
from .objectives import GateConfig, LossWeights, PoolingMethod, ScoringConfig
from .training import TrainConfig

__all__ = ["ConfigError", "parse_kv", "read_kv", "dataset_spec_from", "train_config_from", "format_kv"]


class ConfigError(ValueError):
    pass


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key or not value:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {raw.strip()!r}")
        if key in out:
            raise ConfigError(f"{source}:{n}: duplicate key {key!r}")
        out[key] = value
    return out


def read_kv(path: Union[str, os.PathLike]) -> dict[str, str]:
    with open(path, encoding="utf-8") as fh:
        return parse_kv(fh.read(), str(path))


def _coerce(key: str, value: str, like):
    try:
        if isinstance(like, bool):
            if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return value.lower() in ("true", "1", "yes")
        if isinstance(like, int):
            return int(value)
        if isinstance(like, float):
            return float(value)
        if isinstance(like, PoolingMethod):
            return PoolingMethod(value)
        return value
    except ValueError:
        raise ConfigError(f"{key}: cannot read {value!r} as {type(like).__name__}") from None


def _fill(cls, defaults, items: dict[str, str], prefix: str = ""):
    changes = {}
    for f in dataclasses.fields(cls):
        key = prefix + f.name
        if key in items:
            changes[f.name] = _coerce(key, items.pop(key), getattr(defaults, f.name))
    try:
        return dataclasses.replace(defaults, **changes)
    except (ValueError, RuntimeError) as exc:
        raise ConfigError(str(exc)) from exc


def dataset_spec_from(items: dict[str, str]) -> DatasetSpec:
    items = dict(items)
    spec = _fill(DatasetSpec, DatasetSpec(), items)
    if items:
        raise ConfigError(f"unknown dataset keys: {', '.join(sorted(items))}")
    return spec


_ALIASES = {
    "alpha_r": ("weights", "retrieval"),
    "alpha_g": ("weights", "generation"),
    "gate_p": ("gate", "p"),
    "temperature": ("scoring", "temperature"),
}


def train_config_from(items: dict[str, str]) -> tuple[TrainConfig, int]:
    """Returns (config, seed); ``seed`` defaults to 0."""
    items = dict(items)
    seed = _coerce("seed", items.pop("seed"), 0) if "seed" in items else 0
    model = _fill(ModelConfig, ModelConfig(), items, "model.")
    nested = {"weights": LossWeights(), "gate": GateConfig(), "scoring": ScoringConfig()}
    for key, (group, attr) in _ALIASES.items():
        if key in items:
            value = _coerce(key, items.pop(key), 0.0)
            try:
                nested[group] = dataclasses.replace(nested[group], **{attr: value})
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from exc
    # nested groups are only reachable through their aliases
    for key in ("model", *nested):
        if key in items:
            raise ConfigError(f"unknown training key: {key}")
    config = _fill(TrainConfig, dataclasses.replace(TrainConfig(), model=model, **nested), items)
    if items:
        raise ConfigError(f"unknown training keys: {', '.join(sorted(items))}")
    return config, seed


def format_kv(items: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in items.items())
