"""Configuration management for bustop.

PipelineConfig gathers every tunable constant of the pipeline with its default, and hands
out the per-module parameter objects (ClusterParams, MfccConfig, ForestParams, ...).

load_config() resolves each field with precedence:
    CLI flag > config file > environment > default

The config file is TOML, or JSON when its name ends in `.json`; keys are field names and
unknown keys are rejected. The only environment variable is BUSTOP_SEED.
"""

from __future__ import annotations

import dataclasses
import json
import os
import tomllib
from collections.abc import Mapping
from dataclasses import dataclass, fields
from pathlib import Path

from .acoustics import MfccConfig
from .features import FeatureParams
from .forest import ForestParams
from .learner import LearnerParams
from .models import BustopError
from .staypoint import ClusterParams


class ConfigError(BustopError):
    """Raised when a config file or value cannot be used."""


@dataclass
class PipelineConfig:
    # stay-point detection
    chi: float = 3.0
    rho: float = 30.0
    utc_offset_min: int = 330
    # acoustics
    frame_len: int = 200
    hop: int = 80
    n_mel: int = 26
    n_ceps: int = 13
    log_floor: float = 1e-10
    # map encoding
    zoom: int = 18
    box_m: float = 300.0
    box_n: float = 300.0
    tile_root: str | None = None
    # learner
    n_trees: int = 100
    max_depth: int = 8
    features_per_split: int = 3
    min_leaf: int = 1
    bootstrap: bool = True
    selector_trees: int = 250
    k_max: int = 8
    smote_k: int = 5
    threshold: float = 0.5
    cv_folds: int = 5
    cv_repeats: int = 10
    test_fraction: float = 0.3
    # eta
    speed: float = 17.0
    # run
    seed: int = 0
    n_jobs: int = 1

    def cluster_params(self) -> ClusterParams:
        return ClusterParams(chi=self.chi, rho=self.rho, utc_offset_min=self.utc_offset_min)

    def mfcc_config(self) -> MfccConfig:
        return MfccConfig(self.frame_len, self.hop, self.n_mel, self.n_ceps, self.log_floor)

    def feature_params(self) -> FeatureParams:
        return FeatureParams(self.mfcc_config(), self.box_m, self.box_n)

    def forest_params(self) -> ForestParams:
        return ForestParams(
            n_trees=self.n_trees,
            max_depth=self.max_depth,
            features_per_split=self.features_per_split,
            min_leaf=self.min_leaf,
            bootstrap=self.bootstrap,
            seed=self.seed,
        )

    def learner_params(self) -> LearnerParams:
        return LearnerParams(
            forest=self.forest_params(),
            selector_trees=self.selector_trees,
            k_max=self.k_max,
            smote_k=self.smote_k,
            threshold=self.threshold,
            seed=self.seed,
        )

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


FIELDS = {f.name: f for f in fields(PipelineConfig)}


def _coerce(name: str, value: object) -> object:
    """Convert a file or environment value to the field's declared type."""
    kind = str(FIELDS[name].type)
    try:
        if value is None:
            if "None" not in kind:
                raise TypeError("null not allowed")
            return None
        if kind.startswith("bool"):
            if isinstance(value, str):
                if value.lower() not in ("true", "false", "1", "0"):
                    raise ValueError(value)
                return value.lower() in ("true", "1")
            return bool(value)
        if kind.startswith("int"):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)  # type: ignore[arg-type]
        if kind.startswith("float"):
            return float(value)  # type: ignore[arg-type]
        return str(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad value for {name}: {value!r} ({e})") from e


def read_config_file(path: Path | str) -> dict:
    """Read a TOML (or .json) config file into field overrides."""
    path = Path(path)
    try:
        if path.suffix == ".json":
            data = json.loads(path.read_text(encoding="utf-8"))
        else:
            with path.open("rb") as f:
                data = tomllib.load(f)
    except (OSError, ValueError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a table of settings")
    unknown = sorted(set(data) - set(FIELDS))
    if unknown:
        raise ConfigError(f"{path}: unknown settings {', '.join(unknown)}")
    return {name: _coerce(name, value) for name, value in data.items()}


def load_config(
    flags: Mapping[str, object] | None = None,
    path: Path | str | None = None,
    environ: Mapping[str, str] | None = None,
) -> PipelineConfig:
    """Resolve configuration from CLI flags, config file, environment, and defaults.

    Precedence: CLI flag > config file > env var > default

    Args:
        flags: Values given on the command line; None entries mean "not given"
        path: Optional TOML or JSON config file
        environ: Environment (defaults to os.environ)
    """
    environ = os.environ if environ is None else environ
    values: dict[str, object] = {}
    if seed := environ.get("BUSTOP_SEED"):
        values["seed"] = _coerce("seed", seed)
    if path is not None:
        values.update(read_config_file(path))
    for name, value in (flags or {}).items():
        if value is not None and name in FIELDS:
            values[name] = value
    try:
        return PipelineConfig(**values)  # type: ignore[arg-type]
    except TypeError as e:
        raise ConfigError(str(e)) from e


CONFIG: PipelineConfig | None = None


def get_config() -> PipelineConfig:
    """Returns the global CONFIG instance, resolving defaults and environment on first use."""
    global CONFIG
    if CONFIG is None:
        CONFIG = load_config()
    return CONFIG
