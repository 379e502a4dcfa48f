"""
Configuration

JSON config with one section per module, layered as
built-in preset < config file < environment (VIBROSP_*) < command-line flags.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path

from scripts.dsp_kernels import StageKind
from scripts.errors import ConfigError
from scripts.feature_extraction import SPECTRAL_FEATURES, FeatureCatalog
from scripts.ml_optimizer import (
    DEFAULT_GRIDS,
    DEFAULT_RFECV_PARAMS,
    RfecvSchedule,
    TrainingPlan,
)
from scripts.pipeline_optimizer import GridMode
from scripts.estimators import ESTIMATOR_KINDS
from scripts.signal_io import (
    DEFAULT_CHANNEL_COLUMNS,
    NATIVE_SAMPLING_RATE_HZ,
    SAMPLING_PRESETS,
    SamplingSpec,
    SynthSpec,
)

logger = logging.getLogger(__name__)

ENV_PREFIX = "VIBROSP_"
SHRUNKEN_REQUIRED_ABOVE = 100_000
RUNTIME_KEYS = ("jobs", "cache_dir", "output_dir", "log_level")
SECTIONS = (
    "data",
    "synth",
    "folds",
    "features",
    "signal_processing",
    "ml",
    "stats",
    "experiments",
    "comparisons",
)
_ENV_KEYS = {
    "DATA_DIR": ("data", "data_dir"),
    "OUTPUT_DIR": (None, "output_dir"),
    "CACHE_DIR": (None, "cache_dir"),
    "JOBS": (None, "jobs"),
    "SEED": (None, "seed"),
    "LOG_LEVEL": (None, "log_level"),
}

_BASE = {
    "data": {
        "source": "synth",
        "data_dir": "data/fixture",
        "channel_columns": list(DEFAULT_CHANNEL_COLUMNS),
        "sampling_rate_hz": None,
    },
    "synth": {
        "windows_per_class": 30,
        "sampling_rate_hz": 5000.0,
        "duration_s": 1.0,
        "noise_level": 0.3,
    },
    "folds": {"k": 3},
    "features": {"n_bands": 64, "features": list(SPECTRAL_FEATURES)},
    "signal_processing": {
        "stages": [k.value for k in StageKind],
        "joint_search": False,
        "max_imfs": 10,
    },
    "ml": {
        "estimators": list(ESTIMATOR_KINDS),
        "inner_k": 3,
        "min_features": 1,
        "rfecv": {"thresholds": [700, 350, 125, 75, 37, 17, 8], "steps": [400, 100, 50, 25, 12, 6, 3]},
        "grids": copy.deepcopy(DEFAULT_GRIDS),
        "rfecv_params": copy.deepcopy(DEFAULT_RFECV_PARAMS),
    },
    "stats": {"alpha": 0.05, "n_boot": 10000, "zero_method": "wilcox"},
    "experiments": [],
    "comparisons": [],
    "seed": 42,
    "jobs": 1,
    "cache_dir": ".cache/vibrosp",
    "output_dir": "output",
    "log_level": "INFO",
}

PRESETS = {
    "fixture": {
        "ml": {
            "grids": {
                "logreg": {"l2_lambda": [1e-3, 1e-2, 1e-1, 1.0, 10.0]},
                "gbt": {"max_depth": [2, 3], "n_trees": [20, 50], "l2_leaf": [1.0, 3.0]},
            },
            "rfecv_params": {"gbt": {"max_depth": 2, "n_trees": 15, "l2_leaf": 3.0}},
        },
        "stats": {"n_boot": 2000},
        "experiments": [
            {"name": "native", "sampling": {"factor": 1, "n": None}, "grid_mode": "full"},
            {"name": "decimated", "sampling": {"factor": 5, "n": None}, "grid_mode": "full"},
            {"name": "truncated", "sampling": {"factor": 1, "n": 500}, "grid_mode": "full"},
        ],
        "comparisons": [
            {"alt": "native", "null": "decimated"},
            {"alt": "native", "null": "truncated"},
        ],
    },
    "mafaulda_full": {
        "data": {"source": "directory", "data_dir": "data/mafaulda", "sampling_rate_hz": NATIVE_SAMPLING_RATE_HZ},
        "experiments": [
            {"name": "native", "sampling": {"preset": "native_50khz_5s"}, "grid_mode": "shrunken"},
            {"name": "decimated", "sampling": {"preset": "decimate_1khz_5s"}, "grid_mode": "full"},
            {"name": "truncated", "sampling": {"preset": "truncate_50khz_0p1s"}, "grid_mode": "full"},
        ],
        "comparisons": [
            {"alt": "native", "null": "decimated"},
            {"alt": "native", "null": "truncated"},
        ],
    },
}


def deep_merge(base: dict, override: Mapping) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


# Sections


@dataclass(slots=True)
class DataSettings:
    source: str = "synth"
    data_dir: Path = Path("data/fixture")
    channel_columns: tuple = DEFAULT_CHANNEL_COLUMNS
    sampling_rate_hz: float | None = None

    def __post_init__(self):
        if self.source not in ("synth", "directory"):
            raise ConfigError(f"data.source must be 'synth' or 'directory', got {self.source!r}")
        self.data_dir = Path(self.data_dir)
        self.channel_columns = tuple(int(c) for c in self.channel_columns)


@dataclass(slots=True)
class SignalProcessingSettings:
    stages: tuple = tuple(StageKind)
    joint_search: bool = False
    max_imfs: int = 10

    def __post_init__(self):
        try:
            self.stages = tuple(StageKind(s) for s in self.stages)
        except ValueError as exc:
            raise ConfigError(f"signal_processing.stages: {exc}") from None


@dataclass(slots=True)
class MlSettings:
    estimators: tuple = ESTIMATOR_KINDS
    inner_k: int = 3
    min_features: int = 1
    schedule: RfecvSchedule = field(default_factory=RfecvSchedule)
    grids: dict = field(default_factory=lambda: copy.deepcopy(DEFAULT_GRIDS))
    rfecv_params: dict = field(default_factory=lambda: copy.deepcopy(DEFAULT_RFECV_PARAMS))

    def __post_init__(self):
        self.estimators = tuple(self.estimators)
        unknown = set(self.estimators) - set(ESTIMATOR_KINDS)
        if unknown or not self.estimators:
            raise ConfigError(f"ml.estimators must be a non-empty subset of {ESTIMATOR_KINDS}")
        if self.inner_k < 2:
            raise ConfigError(f"ml.inner_k must be >= 2, got {self.inner_k}")

    def plan(self, kind: str, seed: int) -> TrainingPlan:
        return TrainingPlan(
            estimator=kind,
            grid=self.grids.get(kind),
            rfecv_params=self.rfecv_params.get(kind),
            schedule=self.schedule,
            inner_k=self.inner_k,
            seed=seed,
            min_features=self.min_features,
        )


@dataclass(slots=True)
class StatSettings:
    alpha: float = 0.05
    n_boot: int = 10000
    zero_method: str = "wilcox"

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ConfigError(f"stats.alpha must be in (0, 1), got {self.alpha}")
        if self.n_boot < 1:
            raise ConfigError("stats.n_boot must be >= 1")
        if self.zero_method not in ("wilcox", "pratt"):
            raise ConfigError(f"stats.zero_method must be 'wilcox' or 'pratt', got {self.zero_method!r}")


def _sampling_from_dict(d: Mapping) -> SamplingSpec:
    if d.get("preset"):
        return SamplingSpec.preset(d["preset"])
    return SamplingSpec.custom(int(d.get("factor", 1)), d.get("n"))


@dataclass(slots=True)
class ExperimentConfig:
    name: str
    sampling: SamplingSpec
    grid_mode: GridMode = GridMode.FULL
    estimators: tuple | None = None

    def __post_init__(self):
        if not self.name or "/" in self.name:
            raise ConfigError(f"Invalid experiment name {self.name!r}")
        try:
            self.grid_mode = GridMode(self.grid_mode)
        except ValueError:
            raise ConfigError(f"{self.name}: unknown grid_mode {self.grid_mode!r}") from None

    def check_grid(self, window_length: int) -> None:
        """Full grids are refused for windows longer than 100k samples."""
        if window_length > SHRUNKEN_REQUIRED_ABOVE and self.grid_mode is GridMode.FULL:
            raise ConfigError(
                f"Experiment {self.name}: windows of {window_length} samples need "
                f"grid_mode 'shrunken'"
            )

    def to_dict(self) -> dict:
        sampling = (
            {"preset": self.sampling.name}
            if self.sampling.name in SAMPLING_PRESETS
            else {"factor": self.sampling.factor, "n": self.sampling.n}
        )
        return {
            "name": self.name,
            "sampling": sampling,
            "grid_mode": self.grid_mode.value,
            "estimators": None if self.estimators is None else list(self.estimators),
        }


@dataclass(slots=True)
class ComparisonSpec:
    alt: str
    null: str

    @property
    def name(self) -> str:
        return f"{self.alt}_vs_{self.null}"


@dataclass(slots=True)
class AppConfig:
    data: DataSettings
    synth: SynthSpec
    k: int
    features: FeatureCatalog
    signal_processing: SignalProcessingSettings
    ml: MlSettings
    stats: StatSettings
    experiments: list
    comparisons: list
    seed: int = 42
    jobs: int = 1
    cache_dir: Path = Path(".cache/vibrosp")
    output_dir: Path = Path("output")
    log_level: str = "INFO"
    raw: dict = field(default_factory=dict, repr=False)

    def experiment(self, name: str) -> ExperimentConfig:
        for e in self.experiments:
            if e.name == name:
                return e
        raise ConfigError(
            f"Unknown experiment {name!r}; configured: {[e.name for e in self.experiments]}"
        )

    def estimators_for(self, exp: ExperimentConfig) -> tuple:
        return self.ml.estimators if exp.estimators is None else exp.estimators

    def n_tests(self) -> int:
        """Bonferroni family size: comparisons x estimators."""
        return max(1, len(self.comparisons) * len(self.ml.estimators))

    def canonical_json(self) -> str:
        """Result-affecting settings only; runtime knobs do not change the hash."""
        payload = {k: v for k, v in self.raw.items() if k not in RUNTIME_KEYS}
        return json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def config_from_dict(raw: Mapping) -> AppConfig:
    unknown = set(raw) - set(SECTIONS) - {"seed", "jobs", "cache_dir", "output_dir", "log_level"}
    if unknown:
        raise ConfigError(f"Unknown config keys: {sorted(unknown)}")
    try:
        synth = SynthSpec(**raw["synth"])
        synth.validate()
        rfecv = raw["ml"].get("rfecv", {})
        ml_raw = {k: v for k, v in raw["ml"].items() if k != "rfecv"}
        experiments = [
            ExperimentConfig(
                name=e["name"],
                sampling=_sampling_from_dict(e.get("sampling", {})),
                grid_mode=e.get("grid_mode", "full"),
                estimators=None if e.get("estimators") is None else tuple(e["estimators"]),
            )
            for e in raw["experiments"]
        ]
        cfg = AppConfig(
            data=DataSettings(**raw["data"]),
            synth=synth,
            k=int(raw["folds"]["k"]),
            features=FeatureCatalog(
                n_bands=int(raw["features"].get("n_bands", 64)),
                features=tuple(raw["features"].get("features", SPECTRAL_FEATURES)),
            ),
            signal_processing=SignalProcessingSettings(**raw["signal_processing"]),
            ml=MlSettings(schedule=RfecvSchedule(**rfecv), **ml_raw),
            stats=StatSettings(**raw["stats"]),
            experiments=experiments,
            comparisons=[ComparisonSpec(c["alt"], c["null"]) for c in raw["comparisons"]],
            seed=int(raw["seed"]),
            jobs=int(raw["jobs"]),
            cache_dir=Path(raw["cache_dir"]),
            output_dir=Path(raw["output_dir"]),
            log_level=str(raw["log_level"]).upper(),
            raw=dict(raw),
        )
    except (TypeError, KeyError) as exc:
        raise ConfigError(f"Invalid configuration: {exc}") from exc

    if cfg.k < 2:
        raise ConfigError(f"folds.k must be >= 2, got {cfg.k}")
    names = [e.name for e in cfg.experiments]
    if len(set(names)) != len(names):
        raise ConfigError(f"Duplicate experiment names: {names}")
    for c in cfg.comparisons:
        cfg.experiment(c.alt)
        cfg.experiment(c.null)
    for e in cfg.experiments:
        for kind in cfg.estimators_for(e):
            if kind not in ESTIMATOR_KINDS:
                raise ConfigError(f"Experiment {e.name}: unknown estimator {kind!r}")
    return cfg


def _env_overrides(env: Mapping) -> dict:
    out: dict = {}
    for suffix, (section, key) in _ENV_KEYS.items():
        value = env.get(ENV_PREFIX + suffix)
        if value in (None, ""):
            continue
        if suffix in ("JOBS", "SEED"):
            try:
                value = int(value)
            except ValueError:
                raise ConfigError(f"{ENV_PREFIX}{suffix} must be an integer, got {value!r}") from None
        if section is None:
            out[key] = value
        else:
            out.setdefault(section, {})[key] = value
    return out


def load_config(
    path=None,
    preset: str = "fixture",
    overrides: Mapping | None = None,
    env: Mapping | None = None,
) -> AppConfig:
    """Resolve the effective configuration; flags in ``overrides`` win."""
    if preset not in PRESETS:
        raise ConfigError(f"Unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
    raw = deep_merge(_BASE, PRESETS[preset])
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"Config file not found: {path}")
        try:
            file_cfg = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        raw = deep_merge(raw, file_cfg)
    raw = deep_merge(raw, _env_overrides(os.environ if env is None else env))
    if overrides:
        raw = deep_merge(raw, {k: v for k, v in overrides.items() if v is not None})
    logger.debug(f"Effective configuration: {json.dumps(raw, sort_keys=True, default=str)}")
    return config_from_dict(raw)
