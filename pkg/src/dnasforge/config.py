"""Run configuration: one JSON document, overridden by command-line flags.

Keys are either ``SearchConfig`` fields or the run-level keys below. Unknown
keys are rejected, and every problem is reported at once.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Any, Optional

from .data import Dataset, cifar_subset, load_cifar10_bin, split_dataset, synth_blobs
from .engine import SearchConfig, config_hash
from .errors import ConfigError

RUN_DEFAULTS = {
    "space": {"schema": 1, "kind": "toy"},
    "lut": None,
    "lut_model": "analytic_macs",
    "dataset": "synth_blobs",
    "n": 400,
    "noise_sigma": 0.1,
    "data_seed": None,
    "cifar_path": None,
    "cifar_classes": [0, 1],
    "cifar_limit": 2000,
    "eval_fraction": 0.25,
    "split_ratio": 0.8,
}
SEARCH_KEYS = set(SearchConfig.field_names())


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def search_config(self) -> SearchConfig:
        return SearchConfig(**{k: v for k, v in self.values.items() if k in SEARCH_KEYS})

    def to_dict(self) -> dict:
        return dict(self.values)

    def hash(self) -> str:
        return config_hash(self.values)


def _problems(values: dict) -> list:
    problems = []
    for k in sorted(values):
        if k not in SEARCH_KEYS and k not in RUN_DEFAULTS:
            problems.append(f"unknown key {k!r}")
    if values.get("dataset") not in ("synth_blobs", "cifar10"):
        problems.append(f"dataset must be 'synth_blobs' or 'cifar10', got {values.get('dataset')!r}")
    if values.get("dataset") == "cifar10" and not values.get("cifar_path"):
        problems.append("dataset 'cifar10' needs cifar_path")
    if not 0 < values.get("eval_fraction", 0) < 1:
        problems.append(f"eval_fraction must be in (0, 1), got {values.get('eval_fraction')}")
    if not 0 < values.get("split_ratio", 0) < 1:
        problems.append(f"split_ratio must be in (0, 1), got {values.get('split_ratio')}")
    if not isinstance(values.get("n"), int) or values["n"] < 4:
        problems.append(f"n must be an integer >= 4, got {values.get('n')!r}")
    if values.get("lut_model") not in ("analytic_macs", "macs_plus_memory"):
        problems.append(f"lut_model must be 'analytic_macs' or 'macs_plus_memory', got {values.get('lut_model')!r}")
    search = {k: v for k, v in values.items() if k in SEARCH_KEYS}
    try:
        SearchConfig(**search)
    except ConfigError as exc:
        problems.extend(exc.problems)
    except TypeError as exc:
        problems.append(str(exc))
    return problems


def parse_json_text(text: str, source: str) -> dict:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        lines = text.splitlines()
        context = lines[exc.lineno - 1] if 0 < exc.lineno <= len(lines) else ""
        raise ConfigError(f"{source}: line {exc.lineno} column {exc.colno}: {exc.msg}: {context.strip()!r}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{source}: top level must be a JSON object")
    return doc


def load_run_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> RunConfig:
    """Defaults, then the file at ``path``, then ``overrides`` (flags); validated as a whole."""
    values = dict(RUN_DEFAULTS)
    values.update({k: v for k, v in SearchConfig().to_dict().items() if k not in ("warmup",)})
    values["warmup"] = None
    if path:
        with open(path, encoding="utf-8") as fh:
            values.update(parse_json_text(fh.read(), path))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    if isinstance(values.get("space"), str):
        base = os.path.dirname(os.path.abspath(path)) if path else os.getcwd()
        sp = values["space"] if os.path.isabs(values["space"]) else os.path.join(base, values["space"])
        with open(sp, encoding="utf-8") as fh:
            values["space"] = parse_json_text(fh.read(), sp)
    problems = _problems(values)
    if problems:
        raise ConfigError(problems)
    values["warmup"] = SearchConfig(**{k: v for k, v in values.items() if k in SEARCH_KEYS}).warmup
    return RunConfig(values)


def build_datasets(rc: RunConfig, in_shape: tuple, num_classes: int) -> tuple:
    """``(w_split, theta_split, eval_split)`` for a run."""
    seed = rc["data_seed"] if rc["data_seed"] is not None else rc["seed"]
    if rc["dataset"] == "synth_blobs":
        c, h, w = in_shape
        if h != w:
            raise ConfigError(f"synth_blobs needs square inputs, space expects {in_shape}")
        full = synth_blobs(rc["n"], num_classes, h, rc["noise_sigma"], seed, c)
    else:
        full = cifar_subset(load_cifar10_bin(rc["cifar_path"]), rc["cifar_classes"], rc["cifar_limit"])
        if full.shape != tuple(in_shape) or full.class_count != num_classes:
            raise ConfigError(f"CIFAR subset has shape {full.shape} and {full.class_count} classes; "
                              f"space expects {tuple(in_shape)} and {num_classes}")
    train, held_out = split_dataset(full, 1.0 - rc["eval_fraction"], seed + 1)
    w, theta = split_dataset(train, rc["split_ratio"], seed + 2)
    return w, theta, held_out


__all__ = ["RunConfig", "load_run_config", "build_datasets", "Dataset", "RUN_DEFAULTS"]
