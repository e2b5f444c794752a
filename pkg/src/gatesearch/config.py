"""Run configuration: flat sectioned key-value files, strictly validated.

Unknown sections or keys are rejected so typos fail loudly. Paths are
resolved relative to the config file and must exist at load time.
"""
from __future__ import annotations

import configparser
import os
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigurationError
from .search import SearchConfig
from .spaces import SpaceConfig

OUTPUT_ROOT_ENV = "GATESEARCH_OUTPUT_ROOT"


@dataclass
class DataConfig:
    format: str = "synthetic"
    path: str | None = None
    labels_path: str | None = None
    spec: str | None = None
    split: float = 0.8
    normalize: bool = True
    seed: int = 0


@dataclass
class RunConfig:
    space: SpaceConfig
    search: SearchConfig
    data: DataConfig
    out_dir: Path


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: '{s}'")


def _parse_int_tuple(s: str) -> tuple:
    s = s.strip()
    if not s:
        return ()
    sep = "x" if "x" in s and "," not in s else ","
    return tuple(int(p) for p in s.split(sep) if p.strip())


def _parse_str_tuple(s: str) -> tuple:
    return tuple(p.strip() for p in s.split(",") if p.strip())


_SPACE_FIELDS = {
    "kind": str, "classes": int, "input_shape": _parse_int_tuple,
    "hidden": _parse_int_tuple, "feature_gates": _parse_bool,
    "batchnorm_mlp": _parse_bool, "cells": int, "blocks": int,
    "base_width": int, "operators": _parse_str_tuple, "aggregator": str,
    "stem_width": int, "stem_stride": int, "downsample_every": int,
    "stages": int, "blocks_per_stage": int, "expansion": int,
}

_SEARCH_FIELDS = {
    "lambda": ("lam", float), "tau": ("tau", float),
    "nu_init": ("nu_init", float), "penalty": ("penalty", str),
    "metric": ("metric", str), "mask_policy": ("mask_policy", str),
    "count_aux_params": ("count_aux_params", _parse_bool),
    "al_epochs": ("al_epochs", int), "retrain_epochs": ("retrain_epochs", int),
    "batch_size": ("batch_size", int), "lr": ("lr", float),
    "lr_decay": ("lr_decay", float),
    "lr_decay_epochs": ("lr_decay_epochs", float),
    "retrain_lr": ("retrain_lr", float),
    "retrain_batch_size": ("retrain_batch_size", int),
    "weight_decay": ("weight_decay", float),
    "adam_beta1": ("adam_beta1", float), "adam_beta2": ("adam_beta2", float),
    "adam_eps": ("adam_eps", float), "seed": ("seed", int),
}

_DATA_FIELDS = {
    "format": str, "path": str, "labels_path": str, "spec": str,
    "split": float, "normalize": _parse_bool, "seed": int,
}

_OUTPUT_FIELDS = {"dir": str}


def _apply(section: str, raw: dict, fields: dict, target) -> None:
    for key, value in raw.items():
        if key not in fields:
            raise ConfigurationError(
                f"[{section}] unknown key '{key}' "
                f"(known: {', '.join(sorted(fields))})")
        spec = fields[key]
        attr, conv = spec if isinstance(spec, tuple) else (key, spec)
        try:
            setattr(target, attr, conv(value))
        except (ValueError, TypeError) as exc:
            raise ConfigurationError(
                f"[{section}] bad value for '{key}': {exc}") from None


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigurationError(f"{path}: {exc}") from None

    known = {"space", "search", "data", "output"}
    unknown = set(parser.sections()) - known
    if unknown:
        raise ConfigurationError(
            f"{path}: unknown sections {sorted(unknown)} (known: {sorted(known)})")

    space = SpaceConfig()
    search = SearchConfig()
    datacfg = DataConfig()
    if parser.has_section("space"):
        _apply("space", dict(parser.items("space")), _SPACE_FIELDS, space)
    if parser.has_section("search"):
        _apply("search", dict(parser.items("search")), _SEARCH_FIELDS, search)
    if parser.has_section("data"):
        _apply("data", dict(parser.items("data")), _DATA_FIELDS, datacfg)
    space.validate()
    search.validate()

    # resolve paths relative to the config file; they must exist now
    base = path.parent
    for attr in ("path", "labels_path"):
        value = getattr(datacfg, attr)
        if value:
            resolved = (base / value).resolve() if not os.path.isabs(value) \
                else Path(value)
            if not resolved.exists():
                raise ConfigurationError(
                    f"[data] {attr} does not exist: {resolved}")
            setattr(datacfg, attr, str(resolved))

    out = None
    if parser.has_section("output"):
        raw = dict(parser.items("output"))
        holder = type("O", (), {"dir": None})()
        _apply("output", raw, _OUTPUT_FIELDS, holder)
        out = holder.dir
    if out is None:
        root = os.environ.get(OUTPUT_ROOT_ENV, "runs")
        out = str(Path(root) / path.stem)
    out_dir = Path(out) if os.path.isabs(out) else (base / out)
    return RunConfig(space, search, datacfg, out_dir)


def load_run_dataset(cfg: RunConfig):
    from .data import load_dataset
    return load_dataset(cfg.data.format, cfg.data.path, cfg.data.labels_path,
                        cfg.data.spec, cfg.data.split, cfg.data.seed,
                        cfg.data.normalize)
