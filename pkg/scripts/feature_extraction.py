"""
Feature extraction

Spectral feature catalog computed per channel from the one-sided power
spectrum (rectangular window), assembly of FeatureMatrix objects, and the
fold-local preprocessing (zero-variance removal, standardization) fitted on
training rows only and re-applied to every other row.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.fft import rfft, rfftfreq
from sklearn.feature_selection import VarianceThreshold
from sklearn.preprocessing import StandardScaler

from scripts.errors import (
    AlignmentError,
    AllFeaturesRemovedError,
    ConfigError,
    DegenerateVarianceError,
)
from scripts.signal_io import FaultClass, SignalWindow, check_window_length

logger = logging.getLogger(__name__)

SPECTRAL_FEATURES = (
    "spectral_centroid",
    "spectral_spread",
    "spectral_skewness",
    "spectral_kurtosis",
    "spectral_entropy",
    "spectral_flatness",
    "spectral_slope",
    "spectral_decrease",
    "spectral_variation",
    "spectral_rolloff",
    "spectral_rollon",
    "median_frequency",
    "max_power_frequency",
    "fundamental_frequency",
    "power_bandwidth",
)
DEFAULT_BANDS = 64
VARIANCE_FLOOR = 1e-12
FUNDAMENTAL_MIN_RATIO = 0.1
META_COLUMNS = ("source_id", "label", "fold")


@dataclass(frozen=True, slots=True)
class FeatureCatalog:
    n_bands: int = DEFAULT_BANDS
    features: tuple = SPECTRAL_FEATURES
    rolloff: float = 0.85
    rollon: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(self.features))
        unknown = set(self.features) - set(SPECTRAL_FEATURES)
        if unknown:
            raise ConfigError(f"Unknown spectral features: {sorted(unknown)}")
        if len(set(self.features)) != len(self.features):
            raise ConfigError("Feature names must be unique")
        if self.n_bands < 0:
            raise ConfigError(f"n_bands must be >= 0, got {self.n_bands}")
        if not self.features and self.n_bands == 0:
            raise ConfigError("Feature catalog is empty")

    def channel_names(self) -> list[str]:
        bands = [f"fft_band_{i:02d}" for i in range(self.n_bands)]
        return list(self.features) + bands

    def names(self, n_channels: int) -> list[str]:
        per_channel = self.channel_names()
        return [f"ch{c}_{name}" for c in range(n_channels) for name in per_channel]

    def dimension(self, n_channels: int) -> int:
        return n_channels * (len(self.features) + self.n_bands)


def _first_reaching(cumulative: np.ndarray, level: float) -> int:
    idx = int(np.searchsorted(cumulative, level * cumulative[-1], side="left"))
    return min(idx, cumulative.size - 1)


def spectral_features(x: np.ndarray, sampling_rate_hz: float, cat: FeatureCatalog) -> np.ndarray:
    """Catalog features of one channel, in catalog order."""
    mag = np.abs(rfft(x))
    power = mag**2
    freqs = rfftfreq(x.size, d=1.0 / sampling_rate_hz)
    total = power.sum()

    values = dict.fromkeys(SPECTRAL_FEATURES, 0.0)
    values["spectral_flatness"] = 1.0
    if total > 0:
        p = power / total
        centroid = float(freqs @ p)
        dev = freqs - centroid
        spread = float(np.sqrt((dev**2) @ p))
        cumulative = np.cumsum(power)
        nz = p[p > 0]
        values.update(
            spectral_centroid=centroid,
            spectral_spread=spread,
            spectral_entropy=float(-(nz @ np.log(nz))),
            spectral_flatness=float(
                np.exp(np.mean(np.log(np.maximum(power, np.finfo(float).tiny))))
                / np.mean(power)
            ),
            spectral_rolloff=float(freqs[_first_reaching(cumulative, cat.rolloff)]),
            spectral_rollon=float(freqs[_first_reaching(cumulative, cat.rollon)]),
            median_frequency=float(freqs[_first_reaching(cumulative, 0.5)]),
            max_power_frequency=float(freqs[np.argmax(power)]),
            power_bandwidth=float(
                freqs[_first_reaching(cumulative, 0.975)]
                - freqs[_first_reaching(cumulative, 0.025)]
            ),
        )
        if spread > 0:
            values["spectral_skewness"] = float((dev**3) @ p / spread**3)
            values["spectral_kurtosis"] = float((dev**4) @ p / spread**4)

        mag_total = mag.sum()
        if freqs.size > 1:
            f_dev = freqs - freqs.mean()
            values["spectral_slope"] = float(
                (f_dev @ (mag / mag_total)) / (f_dev @ f_dev)
            )
            tail = mag[1:].sum()
            if tail > 0:
                k = np.arange(1, mag.size)
                values["spectral_decrease"] = float(((mag[1:] - mag[0]) / k).sum() / tail)
            prev, curr = mag[:-1], mag[1:]
            norm = np.sqrt((prev @ prev) * (curr @ curr))
            if norm > 0:
                values["spectral_variation"] = float(1.0 - (prev @ curr) / norm)

        values["fundamental_frequency"] = _fundamental(freqs, power)

    row = [values[name] for name in cat.features]
    if cat.n_bands:
        row.extend(_band_means(mag, cat.n_bands))
    return np.asarray(row, dtype=np.float64)


def _fundamental(freqs: np.ndarray, power: np.ndarray) -> float:
    """Lowest non-DC spectral peak holding at least 10% of the largest power."""
    if power.size < 3:
        return float(freqs[np.argmax(power)])
    inner = power[1:-1]
    peaks = np.flatnonzero(
        (inner >= power[:-2]) & (inner >= power[2:]) & ((inner > power[:-2]) | (inner > power[2:]))
    ) + 1
    if peaks.size == 0:
        return float(freqs[np.argmax(power)])
    strong = peaks[power[peaks] >= FUNDAMENTAL_MIN_RATIO * power[1:].max()]
    return float(freqs[strong[0]]) if strong.size else float(freqs[np.argmax(power)])


def _band_means(mag: np.ndarray, n_bands: int) -> np.ndarray:
    """Mean |FFT| over equal-width bands; a band holding no bin takes its centre bin."""
    n_bins = mag.size
    band_of_bin = np.minimum(np.arange(n_bins) * n_bands // n_bins, n_bands - 1)
    sums = np.bincount(band_of_bin, weights=mag, minlength=n_bands)
    counts = np.bincount(band_of_bin, minlength=n_bands)
    centre = np.minimum(((np.arange(n_bands) + 0.5) * n_bins / n_bands).astype(int), n_bins - 1)
    return np.where(counts > 0, sums / np.maximum(counts, 1), mag[centre])


def extract_features(w: SignalWindow, cat: FeatureCatalog) -> np.ndarray:
    """Channel-major concatenation of the catalog features of each channel."""
    check_window_length(w)
    return np.concatenate(
        [spectral_features(ch, w.sampling_rate_hz, cat) for ch in w.samples]
    )


# Matrices


@dataclass(frozen=True)
class ZeroVarianceMask:
    keep: np.ndarray
    fit_rows: tuple

    def apply(self, values: np.ndarray) -> np.ndarray:
        return values[:, self.keep]


@dataclass(frozen=True)
class FittedScaler:
    scaler: StandardScaler
    fit_rows: tuple

    @property
    def mean(self) -> np.ndarray:
        return self.scaler.mean_

    @property
    def std(self) -> np.ndarray:
        return self.scaler.scale_

    def apply(self, values: np.ndarray) -> np.ndarray:
        return self.scaler.transform(values)

    def inverse(self, values: np.ndarray) -> np.ndarray:
        return self.scaler.inverse_transform(values)


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    values: np.ndarray
    feature_names: tuple
    labels: np.ndarray
    source_ids: tuple
    fold_of: np.ndarray | None = None
    variance_mask: ZeroVarianceMask | None = None
    scaler: FittedScaler | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))
        object.__setattr__(self, "source_ids", tuple(self.source_ids))
        if self.fold_of is not None:
            object.__setattr__(self, "fold_of", np.asarray(self.fold_of, dtype=np.int64))
        if values.ndim != 2 or values.shape[1] != len(self.feature_names):
            raise AlignmentError(
                f"{values.shape} values for {len(self.feature_names)} feature names"
            )
        n = values.shape[0]
        if self.labels.shape != (n,) or len(self.source_ids) != n:
            raise AlignmentError("labels / source ids do not match the row count")
        if self.fold_of is not None and self.fold_of.shape != (n,):
            raise AlignmentError("fold assignment does not match the row count")
        if not np.all(np.isfinite(values)):
            raise AlignmentError("FeatureMatrix contains non-finite values")

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    def rows(self, idx: Sequence[int]) -> FeatureMatrix:
        idx = np.asarray(idx, dtype=np.int64)
        return replace(
            self,
            values=self.values[idx],
            labels=self.labels[idx],
            source_ids=tuple(self.source_ids[i] for i in idx),
            fold_of=None if self.fold_of is None else self.fold_of[idx],
        )

    def columns(self, names: Sequence[str]) -> FeatureMatrix:
        lookup = {n: i for i, n in enumerate(self.feature_names)}
        missing = [n for n in names if n not in lookup]
        if missing:
            raise AlignmentError(f"Unknown feature names: {missing[:5]}")
        idx = [lookup[n] for n in names]
        return replace(self, values=self.values[:, idx], feature_names=tuple(names))

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.values, columns=list(self.feature_names))
        frame.insert(0, "source_id", list(self.source_ids))
        frame.insert(1, "label", self.labels)
        frame.insert(2, "fold", -1 if self.fold_of is None else self.fold_of)
        return frame

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> FeatureMatrix:
        names = [c for c in frame.columns if c not in META_COLUMNS]
        folds = frame["fold"].to_numpy()
        return cls(
            values=frame[names].to_numpy(dtype=np.float64),
            feature_names=tuple(names),
            labels=frame["label"].to_numpy(),
            source_ids=tuple(frame["source_id"].astype(str)),
            fold_of=None if np.all(folds < 0) else folds,
        )


def extract_matrix(
    windows: Sequence[SignalWindow],
    cat: FeatureCatalog,
    fold_of: np.ndarray | None = None,
    jobs: int = 1,
) -> FeatureMatrix:
    if not windows:
        raise AlignmentError("No windows to extract features from")
    n_channels = windows[0].n_channels
    rows = Parallel(n_jobs=jobs)(delayed(extract_features)(w, cat) for w in windows)
    return FeatureMatrix(
        values=np.vstack(rows),
        feature_names=tuple(cat.names(n_channels)),
        labels=np.array([int(w.label) for w in windows]),
        source_ids=tuple(w.source_id for w in windows),
        fold_of=fold_of,
    )


def _fit_subset(m: FeatureMatrix, fit_rows) -> tuple[np.ndarray, tuple]:
    idx = np.asarray(fit_rows, dtype=np.int64)
    if idx.size == 0:
        raise AlignmentError("fit_rows is empty")
    return m.values[idx], tuple(m.source_ids[i] for i in idx)


def drop_zero_variance(m: FeatureMatrix, fit_rows) -> FeatureMatrix:
    """Remove features whose variance over fit_rows is below the floor, everywhere."""
    fit_values, fit_ids = _fit_subset(m, fit_rows)
    selector = VarianceThreshold(threshold=VARIANCE_FLOOR)
    try:
        selector.fit(fit_values)
    except ValueError:
        raise AllFeaturesRemovedError(
            f"All {m.n_features} features have zero variance on the fit rows"
        ) from None
    mask = ZeroVarianceMask(selector.get_support(), fit_ids)
    dropped = m.n_features - int(mask.keep.sum())
    if dropped:
        logger.debug(f"Dropped {dropped} zero-variance features")
    return replace(
        m,
        values=mask.apply(m.values),
        feature_names=tuple(np.asarray(m.feature_names, dtype=object)[mask.keep]),
        variance_mask=mask,
    )


def standardize(m: FeatureMatrix, fit_rows) -> FeatureMatrix:
    fit_values, fit_ids = _fit_subset(m, fit_rows)
    scaler = StandardScaler().fit(fit_values)
    flat = np.flatnonzero(np.sqrt(scaler.var_) < VARIANCE_FLOOR)
    if flat.size:
        raise DegenerateVarianceError(
            f"Feature {m.feature_names[flat[0]]!r} has zero std on the fit rows; "
            f"drop zero-variance features first"
        )
    fitted = FittedScaler(scaler, fit_ids)
    return replace(m, values=fitted.apply(m.values), scaler=fitted)


def preprocess_fold(m: FeatureMatrix, train_rows) -> FeatureMatrix:
    """Zero-variance removal and standardization fitted on train_rows only."""
    return standardize(drop_zero_variance(m, train_rows), train_rows)


def transform_rows(fitted: FeatureMatrix, raw_values: np.ndarray) -> np.ndarray:
    """Apply the preprocessing recorded on ``fitted`` to new raw feature rows."""
    values = np.atleast_2d(raw_values)
    if fitted.variance_mask is not None:
        values = fitted.variance_mask.apply(values)
    if fitted.scaler is not None:
        values = fitted.scaler.apply(values)
    return values


def save_feature_matrix(m: FeatureMatrix, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    m.to_frame().to_parquet(tmp, index=False)
    tmp.replace(path)
    return path


def load_feature_matrix(path) -> FeatureMatrix:
    return FeatureMatrix.from_frame(pd.read_parquet(path))


def label_names(labels: np.ndarray) -> list[str]:
    return [FaultClass(int(x)).name for x in labels]
