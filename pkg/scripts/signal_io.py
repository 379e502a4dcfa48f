"""
Signal I/O

Loads labeled vibration windows from a MAFAULDA-style directory tree,
subsamples them (decimation / truncation), synthesizes a seeded fixture
corpus with class-specific spectral signatures, and assigns stratified
cross-validation folds once for every downstream stage.
"""

from __future__ import annotations

import json
import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path

import numpy as np
import pandas as pd
import polars as pl
from joblib import Parallel, delayed
from sklearn.model_selection import StratifiedKFold

from scripts.errors import (
    ConfigError,
    DatasetNotFoundError,
    EmptyDatasetError,
    InsufficientClassError,
    InvalidWindowError,
    MalformedRowError,
    UnknownClassError,
)

logger = logging.getLogger(__name__)

NATIVE_SAMPLING_RATE_HZ = 50000.0
MIN_WINDOW_SAMPLES = 16
# tachometer in column 0, underhang accelerometer 1-3, overhang 4-6, microphone 7
DEFAULT_CHANNEL_COLUMNS = (1, 2, 3, 4, 5, 6)
N_RAW_COLUMNS = 8
MANIFEST_VERSION = 1


class FaultClass(IntEnum):
    NORMAL = 0
    HORIZONTAL_MISALIGNMENT = 1
    VERTICAL_MISALIGNMENT = 2
    SHAFT_IMBALANCE = 3
    OVERHANG_BEARING = 4
    UNDERHANG_BEARING = 5

    @property
    def directory(self) -> str:
        return _CLASS_DIRECTORIES[self]

    @classmethod
    def from_directory(cls, name: str) -> FaultClass:
        try:
            return _DIRECTORY_CLASSES[name.strip().lower()]
        except KeyError:
            raise UnknownClassError(
                f"Unknown class directory {name!r}; expected one of "
                f"{sorted(_DIRECTORY_CLASSES)}"
            ) from None


_CLASS_DIRECTORIES = {
    FaultClass.NORMAL: "normal",
    FaultClass.HORIZONTAL_MISALIGNMENT: "horizontal-misalignment",
    FaultClass.VERTICAL_MISALIGNMENT: "vertical-misalignment",
    FaultClass.SHAFT_IMBALANCE: "imbalance",
    FaultClass.OVERHANG_BEARING: "overhang",
    FaultClass.UNDERHANG_BEARING: "underhang",
}
_DIRECTORY_CLASSES = {v: k for k, v in _CLASS_DIRECTORIES.items()}


@dataclass(frozen=True, eq=False)
class SignalWindow:
    """One labeled multi-channel window, samples shaped (channels, n_samples)."""

    samples: np.ndarray
    sampling_rate_hz: float
    label: FaultClass
    source_id: str

    def __post_init__(self):
        samples = np.array(self.samples, dtype=np.float64, copy=True, ndmin=2)
        if samples.ndim != 2 or samples.shape[1] < 1:
            raise InvalidWindowError(
                f"{self.source_id}: samples must be (channels, n_samples), "
                f"got shape {samples.shape}"
            )
        if not np.all(np.isfinite(samples)):
            raise InvalidWindowError(f"{self.source_id}: non-finite samples")
        if not self.sampling_rate_hz > 0:
            raise InvalidWindowError(
                f"{self.source_id}: sampling rate must be positive, "
                f"got {self.sampling_rate_hz}"
            )
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sampling_rate_hz", float(self.sampling_rate_hz))
        object.__setattr__(self, "label", FaultClass(self.label))

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.sampling_rate_hz

    def with_samples(self, samples: np.ndarray, sampling_rate_hz=None) -> SignalWindow:
        rate = self.sampling_rate_hz if sampling_rate_hz is None else sampling_rate_hz
        return replace(self, samples=samples, sampling_rate_hz=rate)

    def __eq__(self, other):
        if not isinstance(other, SignalWindow):
            return NotImplemented
        return (
            self.source_id == other.source_id
            and self.label == other.label
            and self.sampling_rate_hz == other.sampling_rate_hz
            and np.array_equal(self.samples, other.samples)
        )

    def __hash__(self):
        return hash((self.source_id, int(self.label), self.sampling_rate_hz))


def check_window_length(w: SignalWindow, minimum: int = MIN_WINDOW_SAMPLES) -> None:
    if w.n_samples < minimum:
        raise InvalidWindowError(
            f"{w.source_id}: {w.n_samples} samples, at least {minimum} required"
        )


@dataclass(frozen=True, eq=False)
class Dataset:
    """Windows plus their fold assignment (None until assign_folds runs)."""

    windows: tuple
    fold_of: np.ndarray | None = None
    seed: int | None = None
    k: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "windows", tuple(self.windows))
        if self.fold_of is not None:
            folds = np.asarray(self.fold_of, dtype=np.int64).copy()
            if folds.shape != (len(self.windows),):
                raise InvalidWindowError(
                    f"fold_of has {folds.size} entries for {len(self.windows)} windows"
                )
            folds.setflags(write=False)
            object.__setattr__(self, "fold_of", folds)

    def __len__(self):
        return len(self.windows)

    def __iter__(self):
        return iter(self.windows)

    @property
    def labels(self) -> np.ndarray:
        return np.array([int(w.label) for w in self.windows], dtype=np.int64)

    @property
    def source_ids(self) -> list[str]:
        return [w.source_id for w in self.windows]

    @property
    def n_folds(self) -> int:
        self._require_folds()
        return int(self.k)

    def _require_folds(self):
        if self.fold_of is None:
            raise ConfigError("Dataset has no fold assignment; run assign_folds first")

    def test_rows(self, fold: int) -> np.ndarray:
        self._require_folds()
        if not 0 <= fold < self.k:
            raise ConfigError(f"Fold {fold} out of range for k={self.k}")
        return np.flatnonzero(self.fold_of == fold)

    def train_rows(self, fold: int) -> np.ndarray:
        self._require_folds()
        if not 0 <= fold < self.k:
            raise ConfigError(f"Fold {fold} out of range for k={self.k}")
        return np.flatnonzero(self.fold_of != fold)

    def subset(self, rows: Sequence[int]) -> list[SignalWindow]:
        return [self.windows[i] for i in rows]

    def map_windows(self, func) -> Dataset:
        return replace(self, windows=tuple(func(w) for w in self.windows))


# Loading


def _read_window(
    path: Path, root: Path, channel_columns: Sequence[int], sampling_rate_hz: float
) -> SignalWindow:
    rel = path.relative_to(root)
    if len(rel.parts) < 2:
        raise UnknownClassError(f"{path}: file is not inside a class directory")
    label = FaultClass.from_directory(rel.parts[0])

    try:
        raw = pl.read_csv(path, has_header=False, infer_schema_length=0)
    except pl.exceptions.NoDataError:
        raise MalformedRowError(path, 1, "file is empty") from None
    except pl.exceptions.PolarsError as exc:
        raise MalformedRowError(path, None, f"unreadable delimited file ({exc})") from exc

    needed = max(channel_columns) + 1
    if raw.width < needed:
        raise MalformedRowError(
            path, 1, f"expected at least {needed} columns, found {raw.width}"
        )

    names = [raw.columns[c] for c in channel_columns]
    casted = raw.select(
        [pl.col(n).str.strip_chars().cast(pl.Float64, strict=False) for n in names]
    )
    # invalid (non-numeric) values become null after the non-strict cast
    bad = casted.with_row_index("row").filter(
        pl.any_horizontal([pl.col(n).is_null() for n in names])
    )
    if bad.height > 0:
        row = int(bad["row"][0])
        values = raw.row(row)
        raise MalformedRowError(
            path,
            row + 1,
            f"non-numeric value in channel columns {list(channel_columns)}: "
            f"{[values[c] for c in channel_columns]}",
        )

    samples = casted.to_numpy().T
    if not np.all(np.isfinite(samples)):
        row = int(np.flatnonzero(~np.isfinite(samples).all(axis=0))[0])
        raise MalformedRowError(path, row + 1, "non-finite value")

    window = SignalWindow(samples, sampling_rate_hz, label, rel.as_posix())
    check_window_length(window)
    return window


def load_directory(
    root,
    channel_columns: Sequence[int] = DEFAULT_CHANNEL_COLUMNS,
    sampling_rate_hz: float = NATIVE_SAMPLING_RATE_HZ,
    jobs: int = 1,
) -> Dataset:
    """
    Read one window per CSV file below ``root``.

    The first path component is the class directory; bearing sub-fault
    directories beneath overhang/underhang are collapsed into that class.
    Files are read in sorted order so the result does not depend on the
    file system listing.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetNotFoundError(f"Dataset directory not found: {root}")

    files = sorted(p for p in root.rglob("*.csv") if p.is_file())
    if not files:
        raise EmptyDatasetError(f"No data files found under {root}")
    if not channel_columns or min(channel_columns) < 0:
        raise ConfigError(f"Invalid channel columns: {channel_columns}")

    logger.info(f"Loading {len(files)} files from {root}")
    windows = Parallel(n_jobs=jobs)(
        delayed(_read_window)(p, root, tuple(channel_columns), sampling_rate_hz)
        for p in files
    )
    counts = class_counts(Dataset(windows))
    logger.info(f"Loaded windows per class: {counts}")
    return Dataset(windows)


def class_counts(d: Dataset) -> dict[str, int]:
    labels = d.labels
    return {c.name: int(np.sum(labels == c)) for c in FaultClass if np.any(labels == c)}


def fold_table(d: Dataset) -> pd.DataFrame:
    """Class counts per fold (rows: classes, columns: folds)."""
    d._require_folds()
    frame = pd.DataFrame(
        {"label": [FaultClass(x).name for x in d.labels], "fold": d.fold_of}
    )
    table = pd.crosstab(frame["label"], frame["fold"])
    table.columns = [f"fold_{c}" for c in table.columns]
    return table


# Subsampling


def decimate(w: SignalWindow, factor: int) -> SignalWindow:
    """Keep every ``factor``-th sample, no anti-alias filter."""
    if factor < 1:
        raise ConfigError(f"Decimation factor must be >= 1, got {factor}")
    if factor > w.n_samples:
        raise InvalidWindowError(
            f"{w.source_id}: decimation factor {factor} exceeds "
            f"{w.n_samples} samples"
        )
    if factor == 1:
        return w
    return w.with_samples(w.samples[:, ::factor], w.sampling_rate_hz / factor)


def truncate(w: SignalWindow, n: int) -> SignalWindow:
    if n < 1:
        raise ConfigError(f"Truncation length must be >= 1, got {n}")
    if n > w.n_samples:
        raise InvalidWindowError(
            f"{w.source_id}: cannot truncate {w.n_samples} samples to {n}"
        )
    if n == w.n_samples:
        return w
    return w.with_samples(w.samples[:, :n])


@dataclass(frozen=True, slots=True)
class SamplingSpec:
    """Decimate first, then truncate (``n`` counts post-decimation samples)."""

    name: str
    factor: int = 1
    n: int | None = None

    def __post_init__(self):
        if self.factor < 1:
            raise ConfigError(f"Sampling {self.name}: factor must be >= 1")
        if self.n is not None and self.n < 1:
            raise ConfigError(f"Sampling {self.name}: n must be >= 1")

    @classmethod
    def preset(cls, name: str) -> SamplingSpec:
        try:
            return SAMPLING_PRESETS[name]
        except KeyError:
            raise ConfigError(
                f"Unknown sampling preset {name!r}; expected one of "
                f"{sorted(SAMPLING_PRESETS)} or custom(factor, n)"
            ) from None

    @classmethod
    def custom(cls, factor: int = 1, n: int | None = None) -> SamplingSpec:
        return cls("custom", factor, n)

    def output_length(self, n_samples: int) -> int:
        length = -(-n_samples // self.factor)
        return length if self.n is None else min(length, self.n)

    def apply(self, w: SignalWindow) -> SignalWindow:
        w = decimate(w, self.factor)
        if self.n is not None:
            w = truncate(w, self.n)
        return w


SAMPLING_PRESETS = {
    "native_50khz_5s": SamplingSpec("native_50khz_5s", 1, None),
    "decimate_1khz_5s": SamplingSpec("decimate_1khz_5s", 50, None),
    "truncate_50khz_0p1s": SamplingSpec("truncate_50khz_0p1s", 1, 5000),
}


def apply_sampling(d: Dataset, spec: SamplingSpec) -> Dataset:
    return d.map_windows(spec.apply)


# Synthetic corpus

ROTATION_RANGE_HZ = (11.7, 60.0)
N_CHANNELS = 6
UNDERHANG_CHANNELS = (0, 1, 2)
OVERHANG_CHANNELS = (3, 4, 5)
# axis of each channel within its accelerometer triple
_AXES = ("axial", "radial", "tangential") * 2
_AXIS_GAIN = {"axial": 0.6, "radial": 1.0, "tangential": 1.0}

# amplitudes of the 1x, 2x, 3x rotation harmonics per axis
_HARMONICS = {
    FaultClass.NORMAL: {"*": (1.0, 0.1, 0.05)},
    FaultClass.SHAFT_IMBALANCE: {"*": (3.0, 0.1, 0.05)},
    FaultClass.HORIZONTAL_MISALIGNMENT: {
        "tangential": (1.0, 1.2, 0.5),
        "*": (1.0, 0.3, 0.1),
    },
    FaultClass.VERTICAL_MISALIGNMENT: {
        "radial": (1.0, 0.5, 1.2),
        "*": (1.0, 0.3, 0.1),
    },
    FaultClass.OVERHANG_BEARING: {"*": (1.0, 0.1, 0.05)},
    FaultClass.UNDERHANG_BEARING: {"*": (1.0, 0.1, 0.05)},
}

# carrier as a fraction of the sampling rate, fault frequency in rotation orders
_BEARING = {
    FaultClass.UNDERHANG_BEARING: {"orders": 3.1, "channels": UNDERHANG_CHANNELS},
    FaultClass.OVERHANG_BEARING: {"orders": 4.7, "channels": OVERHANG_CHANNELS},
}
CARRIER_FRACTION = 0.27
CARRIER_AMPLITUDE = 0.8
MODULATION_DEPTH = 0.8
CROSS_TALK_GAIN = 0.15


@dataclass(slots=True)
class SynthSpec:
    windows_per_class: int | Mapping = 30
    sampling_rate_hz: float = 5000.0
    duration_s: float = 1.0
    rotation_hz_range: tuple = ROTATION_RANGE_HZ
    noise_level: float = 0.3
    classes: tuple = tuple(FaultClass)

    def counts(self) -> dict[FaultClass, int]:
        if isinstance(self.windows_per_class, Mapping):
            return {
                FaultClass(c) if not isinstance(c, str) else FaultClass[c]: int(n)
                for c, n in self.windows_per_class.items()
            }
        return {FaultClass(c): int(self.windows_per_class) for c in self.classes}

    def validate(self) -> None:
        counts = self.counts()
        if not counts or sum(counts.values()) == 0:
            raise ConfigError("Synthetic spec defines no windows")
        if any(n < 0 for n in counts.values()):
            raise ConfigError("Window counts must be non-negative")
        if not self.duration_s > 0:
            raise ConfigError(f"Duration must be positive, got {self.duration_s}")
        if not self.sampling_rate_hz > 0:
            raise ConfigError("Sampling rate must be positive")
        lo, hi = self.rotation_hz_range
        if not ROTATION_RANGE_HZ[0] <= lo <= hi <= ROTATION_RANGE_HZ[1]:
            raise ConfigError(
                f"Rotation range {self.rotation_hz_range} must lie within "
                f"{ROTATION_RANGE_HZ}"
            )
        if self.noise_level < 0:
            raise ConfigError("Noise level must be non-negative")
        if self.n_samples < MIN_WINDOW_SAMPLES:
            raise ConfigError(
                f"Spec yields {self.n_samples} samples per window, "
                f"at least {MIN_WINDOW_SAMPLES} required"
            )

    @property
    def n_samples(self) -> int:
        return int(round(self.sampling_rate_hz * self.duration_s))


def _synth_samples(
    label: FaultClass, rotation_hz: float, spec: SynthSpec, noise: np.ndarray
) -> np.ndarray:
    fs = spec.sampling_rate_hz
    t = np.arange(spec.n_samples) / fs
    out = np.empty((N_CHANNELS, spec.n_samples))
    harmonics = _HARMONICS[label]
    for ch, axis in enumerate(_AXES):
        amps = harmonics.get(axis, harmonics["*"])
        x = np.zeros(spec.n_samples)
        for order, amp in enumerate(amps, start=1):
            # fixed phase policy: all randomness comes from rotation speed and noise
            phase = 0.3 * order + 0.5 * ch
            x += amp * np.sin(2 * np.pi * order * rotation_hz * t + phase)
        out[ch] = _AXIS_GAIN[axis] * x

    if label in _BEARING:
        bearing = _BEARING[label]
        fault_hz = bearing["orders"] * rotation_hz
        envelope = 1.0 + MODULATION_DEPTH * np.cos(2 * np.pi * fault_hz * t)
        carrier = np.sin(2 * np.pi * CARRIER_FRACTION * fs * t)
        burst = CARRIER_AMPLITUDE * envelope * carrier
        for ch in range(N_CHANNELS):
            gain = 1.0 if ch in bearing["channels"] else CROSS_TALK_GAIN
            out[ch] += gain * burst

    return out + noise


def synth_dataset(spec: SynthSpec, seed: int) -> Dataset:
    """Seeded fixture corpus; windows ordered by class, then index."""
    spec.validate()
    rng = np.random.default_rng(seed)
    lo, hi = spec.rotation_hz_range
    windows = []
    for label, count in sorted(spec.counts().items()):
        for i in range(count):
            rotation_hz = float(rng.uniform(lo, hi))
            noise = spec.noise_level * rng.standard_normal((N_CHANNELS, spec.n_samples))
            samples = _synth_samples(label, rotation_hz, spec, noise)
            windows.append(
                SignalWindow(
                    samples,
                    spec.sampling_rate_hz,
                    label,
                    f"{label.directory}/synth_{i:04d}.csv",
                )
            )
    logger.info(
        f"Synthesized {len(windows)} windows of {spec.n_samples} samples "
        f"@ {spec.sampling_rate_hz:g} Hz"
    )
    return Dataset(windows)


def write_csv_tree(
    d: Dataset, root, channel_columns: Sequence[int] = DEFAULT_CHANNEL_COLUMNS
) -> list[Path]:
    """Write windows as headerless CSV files in the layout load_directory reads."""
    root = Path(root)
    n_columns = max(N_RAW_COLUMNS, max(channel_columns) + 1)
    paths = []
    for w in d.windows:
        if w.n_channels != len(channel_columns):
            raise ConfigError(
                f"{w.source_id}: {w.n_channels} channels, "
                f"{len(channel_columns)} channel columns"
            )
        table = np.zeros((w.n_samples, n_columns))
        table[:, list(channel_columns)] = w.samples.T
        path = root / w.source_id
        path.parent.mkdir(parents=True, exist_ok=True)
        pd.DataFrame(table).to_csv(path, header=False, index=False)
        paths.append(path)
    return paths


# Folds


def assign_folds(d: Dataset, k: int = 3, seed: int = 42) -> Dataset:
    """Stratified k-fold assignment; fold i's test part is the windows with fold i."""
    if k < 2:
        raise ConfigError(f"k must be >= 2, got {k}")
    labels = d.labels
    for c in np.unique(labels):
        count = int(np.sum(labels == c))
        if count < k:
            raise InsufficientClassError(FaultClass(c).name, count, k)

    fold_of = np.full(len(d), -1, dtype=np.int64)
    skf = StratifiedKFold(n_splits=k, shuffle=True, random_state=seed)
    for fold, (_, test_idx) in enumerate(skf.split(np.zeros(len(d)), labels)):
        fold_of[test_idx] = fold
    return replace(d, fold_of=fold_of, seed=seed, k=k)


# Manifest


@dataclass(frozen=True)
class Manifest:
    root: str
    channel_columns: tuple
    sampling_rate_hz: float
    seed: int
    k: int
    entries: tuple = field(default_factory=tuple)

    def fold_map(self) -> dict[str, int]:
        return {e["source_id"]: e["fold"] for e in self.entries}


def build_manifest(
    d: Dataset,
    root,
    channel_columns: Sequence[int] = DEFAULT_CHANNEL_COLUMNS,
    sampling_rate_hz: float = NATIVE_SAMPLING_RATE_HZ,
) -> Manifest:
    d._require_folds()
    entries = tuple(
        {"source_id": w.source_id, "label": w.label.name, "fold": int(f)}
        for w, f in zip(d.windows, d.fold_of)
    )
    return Manifest(
        str(root), tuple(channel_columns), sampling_rate_hz, d.seed, d.k, entries
    )


def manifest_to_json(m: Manifest) -> str:
    payload = {
        "format_version": MANIFEST_VERSION,
        "root": m.root,
        "channel_columns": list(m.channel_columns),
        "sampling_rate_hz": m.sampling_rate_hz,
        "seed": m.seed,
        "k": m.k,
        "files": list(m.entries),
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def save_manifest(m: Manifest, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(manifest_to_json(m))
    tmp.replace(path)
    return path


def load_manifest(path) -> Manifest:
    path = Path(path)
    if not path.is_file():
        raise DatasetNotFoundError(f"Manifest not found: {path}")
    payload = json.loads(path.read_text())
    if payload.get("format_version") != MANIFEST_VERSION:
        raise ConfigError(f"{path}: unsupported manifest version")
    return Manifest(
        payload["root"],
        tuple(payload["channel_columns"]),
        float(payload["sampling_rate_hz"]),
        int(payload["seed"]),
        int(payload["k"]),
        tuple(payload["files"]),
    )


def dataset_from_manifest(m: Manifest, jobs: int = 1) -> Dataset:
    """Reload the windows a manifest lists and restore its folds."""
    d = load_directory(m.root, m.channel_columns, m.sampling_rate_hz, jobs=jobs)
    folds = m.fold_map()
    missing = [s for s in d.source_ids if s not in folds]
    if missing or len(folds) != len(d):
        raise InvalidWindowError(
            f"Manifest and {m.root} disagree: {len(d)} files on disk, "
            f"{len(folds)} in manifest (first unlisted: {missing[:1]})"
        )
    fold_of = np.array([folds[s] for s in d.source_ids], dtype=np.int64)
    return replace(d, fold_of=fold_of, seed=m.seed, k=m.k)
