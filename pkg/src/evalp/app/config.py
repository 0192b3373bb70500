"""Run configuration: a strict JSON schema shared by all commands.

Unknown keys are rejected at every level so sweep typos fail loudly.
Per-stage seeds default to values derived from the global seed.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError
from ..sampling import SirConfig
from ..stage1 import Stage1Config
from ..stage2 import Stage2Config

_DATASET_PARAMS = {
    "gaussian_ring": {"modes", "radius", "sigma"},
    "checkerboard": set(),
    "pinwheel": {"arms"},
    "idx": {"path"},
}


@dataclass
class DatasetConfig:
    name: str = "gaussian_ring"
    n: int = 1024
    params: dict = field(default_factory=dict)


@dataclass
class SweepConfig:
    kl_weights: list = field(default_factory=lambda: [0.1, 1.0, 10.0, 100.0])
    n_seeds: int = 3
    eval_samples: int = 512


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str | None = None
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    stage1: Stage1Config | None = None
    stage2: Stage2Config | None = None
    sir: SirConfig | None = None
    sweep: SweepConfig | None = None

    def derived_seeds(self) -> dict:
        """Per-stage seeds from the global seed, stable across runs."""
        state = np.random.SeedSequence(self.seed).generate_state(4)
        return {
            "dataset": int(state[0]),
            "stage1": int(state[1]),
            "stage2": int(state[2]),
            "sir": int(state[3]),
        }


def _check_keys(section: str, given: dict, allowed: set):
    unknown = set(given) - allowed
    if unknown:
        raise ConfigError(f"{section}: unknown keys {sorted(unknown)} (allowed: {sorted(allowed)})")


def _build(section, cls, given: dict, seed_default, tuple_fields=()):
    allowed = set(cls.__dataclass_fields__)
    _check_keys(section, given, allowed)
    kwargs = dict(given)
    if "seed" in allowed and "seed" not in kwargs:
        kwargs["seed"] = seed_default
    for tf in tuple_fields:
        if tf in kwargs:
            kwargs[tf] = tuple(kwargs[tf])
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{section}: {e}") from e


def parse_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    _check_keys("config", doc, {"seed", "out_dir", "dataset", "stage1", "stage2", "sir", "sweep"})
    cfg = RunConfig(seed=int(doc.get("seed", 0)), out_dir=doc.get("out_dir"))
    seeds = cfg.derived_seeds()

    ds = doc.get("dataset", {})
    _check_keys("dataset", ds, {"name", "n", "params"})
    name = ds.get("name", "gaussian_ring")
    if name not in _DATASET_PARAMS:
        raise ConfigError(f"dataset: unknown name {name!r} (known: {sorted(_DATASET_PARAMS)})")
    params = ds.get("params", {})
    _check_keys(f"dataset.params[{name}]", params, _DATASET_PARAMS[name])
    if name == "idx" and "path" not in params:
        raise ConfigError("dataset.params: 'path' is required for idx datasets")
    cfg.dataset = DatasetConfig(name=name, n=int(ds.get("n", 1024)), params=dict(params))

    if "stage1" in doc:
        cfg.stage1 = _build(
            "stage1", Stage1Config, doc["stage1"], seeds["stage1"], tuple_fields=("hidden",)
        )
    if "stage2" in doc:
        cfg.stage2 = _build("stage2", Stage2Config, doc["stage2"], seeds["stage2"])
    if "sir" in doc:
        cfg.sir = _build("sir", SirConfig, doc["sir"], seeds["sir"])
    if "sweep" in doc:
        _check_keys("sweep", doc["sweep"], set(SweepConfig.__dataclass_fields__))
        cfg.sweep = SweepConfig(**doc["sweep"])
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    return parse_config(doc)


def config_hash(doc) -> str:
    """Stable digest of a JSON-serializable document, for reports."""
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]
