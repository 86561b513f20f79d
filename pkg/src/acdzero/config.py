"""INI run configuration and ablation variants.

A config file has up to four sections, each overriding the defaults of one
dataclass::

    [train]   -> TrainConfig scalars (lr, episodes, workers, ...)
    [sim]     -> SimConfig
    [search]  -> SearchConfig
    [model]   -> ModelConfig
"""
from __future__ import annotations

import configparser
import dataclasses
import enum
from dataclasses import fields, replace

from .trainer import TrainConfig

NESTED = ("sim", "search", "model")


class ConfigError(ValueError):
    pass


def _coerce(raw: str, default, key: str):
    try:
        if isinstance(default, bool):
            return {"true": True, "false": False, "1": True, "0": False,
                    "yes": True, "no": False}[raw.strip().lower()]
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except (KeyError, ValueError):
        raise ConfigError(f"bad value {raw!r} for {key}") from None
    return raw.strip()


def _apply(obj, items: dict, section: str):
    known = {f.name: f for f in fields(obj)}
    updates = {}
    for key, raw in items.items():
        if key not in known or key in NESTED:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        updates[key] = _coerce(raw, getattr(obj, key), f"{section}.{key}")
    return replace(obj, **updates)


def load_config(path=None, text: str | None = None) -> TrainConfig:
    parser = configparser.ConfigParser()
    try:
        if text is not None:
            parser.read_string(text)
        elif path is not None:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    cfg = TrainConfig()
    for section in parser.sections():
        items = dict(parser[section])
        if section == "train":
            cfg = _apply(cfg, items, section)
        elif section in NESTED:
            cfg = replace(cfg, **{section: _apply(getattr(cfg, section), items, section)})
        else:
            raise ConfigError(f"unknown section [{section}]")
    try:
        return cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def config_dict(cfg) -> dict:
    """Flat ``{"section.key": value}`` view used for diffs and summaries."""
    out = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            out.update({f"{f.name}.{k}": x for k, x in dataclasses.asdict(v).items()})
        else:
            out[f"train.{f.name}"] = v
    return out


def config_diff(a, b) -> dict:
    da, db = config_dict(a), config_dict(b)
    return {k: (da[k], db[k]) for k in da if da[k] != db[k]}


class Variant(str, enum.Enum):
    FULL = "full"
    NO_MCTS = "no-mcts"
    NO_DISTILL = "no-distill"
    NO_NOISE = "no-noise"
    FIXED_C1 = "fixed-c1"


def variant_config(cfg: TrainConfig, variant: Variant | str) -> TrainConfig:
    """Apply exactly one ablation delta to ``cfg``."""
    v = Variant(variant)
    if v is Variant.NO_MCTS:
        # actions come from the actor; no search targets, no unrolled model loss
        return replace(cfg, use_search=False, behavior="actor")
    if v is Variant.NO_DISTILL:
        return replace(cfg, lambda_pi=0.0)
    if v is Variant.NO_NOISE:
        return replace(cfg, search=replace(cfg.search, noise_fraction=0.0))
    if v is Variant.FIXED_C1:
        return replace(cfg, search=replace(cfg.search, dynamic_c1=False))
    return cfg


VARIANT_KEYS = {
    Variant.FULL: set(),
    Variant.NO_MCTS: {"train.use_search", "train.behavior"},
    Variant.NO_DISTILL: {"train.lambda_pi"},
    Variant.NO_NOISE: {"search.noise_fraction"},
    Variant.FIXED_C1: {"search.dynamic_c1"},
}
