"""
Pytest configuration and fixtures for the test suite
"""

import numpy as np
import pytest

from scripts.feature_extraction import FeatureCatalog, FeatureMatrix
from scripts.signal_io import (
    Dataset,
    FaultClass,
    SignalWindow,
    SynthSpec,
    assign_folds,
    synth_dataset,
)


@pytest.fixture
def rng():
    """Fixture providing a seeded random generator"""
    return np.random.default_rng(42)


@pytest.fixture(scope="session")
def small_synth_spec():
    """Fixture providing a small synthetic corpus spec (6 windows per class, 0.5 s @ 1 kHz)"""
    return SynthSpec(windows_per_class=6, sampling_rate_hz=1000.0, duration_s=0.5)


@pytest.fixture(scope="session")
def small_synth(small_synth_spec):
    """Fixture providing the small synthetic corpus with 3 stratified folds"""
    return assign_folds(synth_dataset(small_synth_spec, seed=42), k=3, seed=42)


@pytest.fixture
def small_catalog():
    """Fixture providing a reduced feature catalog (3 spectral features, 4 bands)"""
    return FeatureCatalog(
        n_bands=4,
        features=("spectral_centroid", "spectral_flatness", "max_power_frequency"),
    )


def make_tone_dataset(n_per_class=6, n_samples=256, seed=0, k=3):
    """Two single-channel classes: a slow and a fast tone, both with a little noise."""
    gen = np.random.default_rng(seed)
    t = np.arange(n_samples)
    windows = []
    for label, omega in ((FaultClass.NORMAL, 0.2), (FaultClass.SHAFT_IMBALANCE, 1.1)):
        for i in range(n_per_class):
            phase = gen.uniform(0, 2 * np.pi)
            x = np.sin(omega * t + phase) + 0.05 * gen.standard_normal(n_samples)
            windows.append(
                SignalWindow(x[None, :], 1000.0, label, f"{label.directory}/tone_{i:03d}.csv")
            )
    return assign_folds(Dataset(windows), k=k, seed=seed)


@pytest.fixture
def tone_dataset():
    """Fixture providing a two-class single-channel tone dataset with 3 folds"""
    return make_tone_dataset()


def make_blobs_matrix(n_per_class=30, n_informative=3, n_noise=7, separation=3.0, n_classes=3, seed=0, k=3):
    """Gaussian class clusters on the first ``n_informative`` columns, noise elsewhere."""
    gen = np.random.default_rng(seed)
    n = n_per_class * n_classes
    labels = np.repeat(np.arange(n_classes), n_per_class)
    values = gen.standard_normal((n, n_informative + n_noise))
    centers = separation * gen.standard_normal((n_classes, n_informative))
    values[:, :n_informative] += centers[labels]
    names = [f"x{i}" for i in range(n_informative)] + [f"noise{i}" for i in range(n_noise)]
    # interleave classes across folds
    fold_of = np.tile(np.arange(k), n // k + 1)[:n]
    return FeatureMatrix(
        values=values,
        feature_names=names,
        labels=labels,
        source_ids=[f"w{i:04d}" for i in range(n)],
        fold_of=fold_of,
    )


@pytest.fixture
def blobs_matrix():
    """Fixture providing a 3-class matrix with 3 informative and 7 noise features"""
    return make_blobs_matrix()
