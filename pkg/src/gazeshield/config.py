"""Experiment configuration: defaults, JSON-schema validation, and flag > file > default merging."""

from __future__ import annotations

import copy
import json
from functools import lru_cache
from importlib import resources
from pathlib import Path

import jsonschema

DEFAULT_CONFIG: dict = {
    "seed": 42,
    "out": "out",
    "data": {
        "csv": None,
        "columns": None,
        "synthetic": {
            "n_students": 9,
            "levels": [1, 2, 3],
            "records_per_student_per_level": 100,
            "signature_separation": 4.0,
            "level_drift": 0.0,
            "diagnosis_assignment": None,
            "outlier_offset": None,
            "clone_of": None,
        },
    },
    "scenario1": {
        "train_levels": [1, 2],
        "test_levels": [3],
        "cv_folds": 5,
        "scaler": "minmax",
        "models": ["rf", "dt"],
        "rf": {"n_estimators": 100, "max_depth": None, "min_samples_split": 2},
        "dt": {"max_depth": None, "min_samples_split": 2},
    },
    "scenario2": {
        "train_levels": [1, 2],
        "test_levels": [3],
        "cv_folds": 5,
        "scaler": "minmax",
        "models": ["rf", "dt"],
        "rf": {"n_estimators": 100, "max_depth": None, "min_samples_split": 2},
        "dt": {"max_depth": None, "min_samples_split": 2},
    },
    "scenario3": {
        "train_frac": 0.6,
        "cv_folds": 5,
        "scaler": "minmax",
        "models": ["rf", "dt"],
        "rf": {"n_estimators": 100, "max_depth": None, "min_samples_split": 2},
        "dt": {"max_depth": None, "min_samples_split": 2},
    },
    "gap": {"model": "rf"},
    "scenario4": {
        "k_range": [2, 6],
        "n_init": 10,
        "novelty_percentile": 95.0,
        "novelty_tau": None,
        "confidence_threshold": 0.5,
        "iforest": {"n_trees": 100, "subsample_size": 256, "threshold": 0.5},
    },
    "phase2": {
        "train_levels": [1, 2],
        "test_levels": [3],
        "n_clients": 2,
        "rounds": 5,
        "folds": 3,
        "epochs": 25,
        "aggregation": "weighted",
        "vault": None,
        "kdf_iterations": 200_000,
        "rotate_epoch": False,
    },
}


class ConfigError(ValueError):
    pass


@lru_cache(maxsize=None)
def load_schema(name: str) -> dict:
    text = resources.files("gazeshield").joinpath("schemas", f"{name}.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def validate(doc: dict, schema_name: str) -> None:
    try:
        jsonschema.validate(doc, load_schema(schema_name))
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{schema_name}: {where}: {exc.message}") from None


def resolve_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the config file, then command-line overrides; validated before return.

    The file is validated on its own too, so unknown keys are rejected even
    where defaults would mask them.
    """
    file_doc: dict = {}
    if path is not None:
        try:
            file_doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(file_doc, dict):
            raise ConfigError("config file must hold a JSON object")
        validate(file_doc, "config")
    merged = deep_merge(DEFAULT_CONFIG, file_doc)
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        node = merged
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    validate(merged, "config")
    return merged
