"""
Tests for spectral features, feature matrices and train-only preprocessing
"""

import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import StratifiedKFold, cross_val_score
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from scripts.errors import AlignmentError, AllFeaturesRemovedError, ConfigError, DegenerateVarianceError
from scripts.feature_extraction import (
    SPECTRAL_FEATURES,
    FeatureCatalog,
    FeatureMatrix,
    drop_zero_variance,
    extract_features,
    extract_matrix,
    label_names,
    load_feature_matrix,
    preprocess_fold,
    save_feature_matrix,
    spectral_features,
    standardize,
    transform_rows,
)


def _features(x, fs=1000.0, **catalog):
    cat = FeatureCatalog(n_bands=0, **catalog)
    return dict(zip(cat.features, spectral_features(np.asarray(x, dtype=float), fs, cat)))


def _matrix(values, labels=None, fold_of=None):
    values = np.asarray(values, dtype=float)
    n = values.shape[0]
    return FeatureMatrix(
        values=values,
        feature_names=[f"f{i}" for i in range(values.shape[1])],
        labels=np.arange(n) % 2 if labels is None else labels,
        source_ids=[f"w{i}" for i in range(n)],
        fold_of=fold_of,
    )


@pytest.mark.unit
class TestFeatureCatalog:
    """Test suite for the feature catalog"""

    def test_default_dimension(self):
        """Test 15 spectral features plus 64 bands per channel"""
        cat = FeatureCatalog()
        assert len(SPECTRAL_FEATURES) == 15
        assert cat.dimension(6) == 6 * 79
        assert len(cat.names(6)) == 474

    def test_names_are_channel_major(self):
        """Test the feature naming order"""
        names = FeatureCatalog(n_bands=2, features=("spectral_centroid",)).names(2)
        assert names == [
            "ch0_spectral_centroid",
            "ch0_fft_band_00",
            "ch0_fft_band_01",
            "ch1_spectral_centroid",
            "ch1_fft_band_00",
            "ch1_fft_band_01",
        ]

    def test_unknown_feature(self):
        """Test that an unknown feature name is a configuration error"""
        with pytest.raises(ConfigError):
            FeatureCatalog(features=("spectral_magic",))

    def test_empty_catalog(self):
        """Test that a catalog with nothing to compute is rejected"""
        with pytest.raises(ConfigError):
            FeatureCatalog(n_bands=0, features=())


@pytest.mark.unit
class TestSpectralFeatures:
    """Test suite for single-channel spectral features"""

    def test_pure_tone(self):
        """Test location features on an on-bin tone"""
        t = np.arange(1000) / 1000.0
        f = _features(np.sin(2 * np.pi * 50 * t))
        assert f["max_power_frequency"] == pytest.approx(50.0)
        assert f["fundamental_frequency"] == pytest.approx(50.0)
        assert f["spectral_centroid"] == pytest.approx(50.0, abs=1e-6)
        assert f["median_frequency"] == pytest.approx(50.0)
        assert f["spectral_spread"] == pytest.approx(0.0, abs=1e-6)
        assert f["spectral_flatness"] < 1e-3

    def test_fundamental_is_lowest_strong_peak(self):
        """Test that the fundamental is the lowest peak, not the largest"""
        t = np.arange(1000) / 1000.0
        x = 0.5 * np.sin(2 * np.pi * 40 * t) + np.sin(2 * np.pi * 120 * t)
        f = _features(x)
        assert f["max_power_frequency"] == pytest.approx(120.0)
        assert f["fundamental_frequency"] == pytest.approx(40.0)

    def test_white_noise_is_flat(self, rng):
        """Test that noise has a much flatter spectrum than a tone"""
        t = np.arange(2048) / 1000.0
        noise = _features(rng.standard_normal(2048))
        tone = _features(np.sin(2 * np.pi * 50 * t))
        assert noise["spectral_flatness"] > 0.3
        assert noise["spectral_flatness"] > 100 * tone["spectral_flatness"]
        assert noise["spectral_entropy"] > tone["spectral_entropy"]

    def test_cumulative_frequencies_are_ordered(self, rng):
        """Test rollon <= median <= rolloff"""
        f = _features(rng.standard_normal(1024))
        assert f["spectral_rollon"] <= f["median_frequency"] <= f["spectral_rolloff"]
        assert f["power_bandwidth"] >= 0

    def test_zero_signal_conventions(self):
        """Test that a silent channel gives finite conventional values"""
        f = _features(np.zeros(256))
        assert all(np.isfinite(v) for v in f.values())
        assert f["spectral_centroid"] == 0.0
        assert f["spectral_flatness"] == 1.0
        assert f["spectral_entropy"] == 0.0

    def test_band_means_fill_empty_bands(self):
        """Test that more bands than bins still yields finite band values"""
        cat = FeatureCatalog(n_bands=64, features=())
        row = spectral_features(np.arange(32.0), 100.0, cat)
        assert row.shape == (64,)
        assert np.all(np.isfinite(row))

    def test_band_means_match_direct_average(self, rng):
        """Test band averaging against a direct computation"""
        x = rng.standard_normal(126)
        cat = FeatureCatalog(n_bands=4, features=())
        mag = np.abs(np.fft.rfft(x))
        expected = [mag[i * 16 : (i + 1) * 16].mean() for i in range(4)]
        np.testing.assert_allclose(spectral_features(x, 1.0, cat), expected)

    @pytest.mark.parametrize("scale", [1e-3, 0.5, 3.0, 250.0])
    def test_shape_features_ignore_amplitude(self, rng, scale):
        """Test that amplitude scaling leaves shape features fixed and scales the bands"""
        x = rng.standard_normal(512)
        cat = FeatureCatalog(
            n_bands=8,
            features=(
                "spectral_centroid",
                "spectral_spread",
                "spectral_rolloff",
                "spectral_flatness",
                "median_frequency",
            ),
        )
        base = spectral_features(x, 1000.0, cat)
        scaled = spectral_features(scale * x, 1000.0, cat)
        np.testing.assert_allclose(scaled[:5], base[:5], rtol=1e-9, atol=1e-9)
        np.testing.assert_allclose(scaled[5:], scale * base[5:], rtol=1e-9)


@pytest.mark.unit
class TestExtraction:
    """Test suite for window and matrix extraction"""

    def test_extract_features_length(self, small_synth):
        """Test that one window yields the catalog dimension"""
        cat = FeatureCatalog()
        assert extract_features(small_synth.windows[0], cat).shape == (cat.dimension(6),)

    def test_extract_matrix_keeps_row_metadata(self, small_synth, small_catalog):
        """Test that labels, ids and folds follow the windows"""
        m = extract_matrix(small_synth.windows, small_catalog, small_synth.fold_of)
        assert m.values.shape == (36, small_catalog.dimension(6))
        np.testing.assert_array_equal(m.labels, small_synth.labels)
        assert list(m.source_ids) == small_synth.source_ids
        np.testing.assert_array_equal(m.fold_of, small_synth.fold_of)

    def test_parallel_extraction_matches_serial(self, small_synth, small_catalog):
        """Test that jobs does not change the values"""
        windows = small_synth.windows[:6]
        serial = extract_matrix(windows, small_catalog, jobs=1)
        parallel = extract_matrix(windows, small_catalog, jobs=2)
        np.testing.assert_array_equal(serial.values, parallel.values)

    @pytest.mark.slow
    def test_synthetic_classes_are_separable(self, small_synth):
        """Test that the fixture corpus carries class information in its features"""
        m = extract_matrix(small_synth.windows, FeatureCatalog(), small_synth.fold_of)
        model = make_pipeline(StandardScaler(), LogisticRegression(C=1.0, max_iter=2000))
        cv = StratifiedKFold(n_splits=3, shuffle=True, random_state=0)
        scores = cross_val_score(model, m.values, m.labels, cv=cv)
        assert scores.mean() > 0.5

    def test_label_names(self):
        """Test label display names"""
        assert label_names(np.array([0, 3])) == ["NORMAL", "SHAFT_IMBALANCE"]


@pytest.mark.unit
class TestPreprocessing:
    """Test suite for zero-variance removal and standardization"""

    def test_constant_column_is_dropped(self, rng):
        """Test removal of a column constant on the fit rows"""
        values = rng.standard_normal((10, 3))
        values[:, 1] = 4.0
        out = drop_zero_variance(_matrix(values), np.arange(10))
        assert out.feature_names == ("f0", "f2")
        assert out.variance_mask.keep.tolist() == [True, False, True]

    def test_variance_judged_on_fit_rows_only(self, rng):
        """Test that a column varying only outside the fit rows is still dropped"""
        values = rng.standard_normal((10, 2))
        values[:6, 0] = 1.0
        out = drop_zero_variance(_matrix(values), np.arange(6))
        assert out.feature_names == ("f1",)
        assert out.values.shape == (10, 1)

    def test_all_features_removed(self):
        """Test that an all-constant matrix raises AllFeaturesRemovedError"""
        with pytest.raises(AllFeaturesRemovedError):
            drop_zero_variance(_matrix(np.ones((5, 3))), np.arange(5))

    def test_standardize_uses_fit_rows(self, rng):
        """Test zero mean and unit std on the fit rows"""
        values = rng.normal(5.0, 3.0, size=(20, 4))
        out = standardize(_matrix(values), np.arange(12))
        np.testing.assert_allclose(out.values[:12].mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.values[:12].std(axis=0), 1.0, rtol=1e-12)
        assert out.scaler.fit_rows == tuple(f"w{i}" for i in range(12))

    def test_standardize_rejects_flat_column(self, rng):
        """Test that standardizing a zero-variance column is an error"""
        values = rng.standard_normal((8, 2))
        values[:, 0] = 0.0
        with pytest.raises(DegenerateVarianceError):
            standardize(_matrix(values), np.arange(8))

    def test_test_rows_do_not_influence_fit(self, rng):
        """Test that changing held-out rows leaves the fitted transform unchanged"""
        values = rng.standard_normal((20, 5))
        train = np.arange(14)
        a = preprocess_fold(_matrix(values), train)
        changed = values.copy()
        changed[14:] = 1e6
        b = preprocess_fold(_matrix(changed), train)
        np.testing.assert_allclose(a.values[train], b.values[train])
        np.testing.assert_allclose(a.scaler.mean, b.scaler.mean)

    def test_transform_rows_matches_fitted(self, rng):
        """Test that recorded preprocessing re-applies to raw rows"""
        values = rng.standard_normal((12, 4))
        values[:, 2] = 7.0
        fitted = preprocess_fold(_matrix(values), np.arange(8))
        np.testing.assert_allclose(transform_rows(fitted, values[9]), fitted.values[9:10])

    def test_inverse_recovers_raw_values(self, rng):
        """Test that the fitted scaler inverts back to the raw feature values"""
        values = rng.normal(-2.0, 40.0, size=(16, 3))
        out = standardize(_matrix(values), np.arange(10))
        np.testing.assert_allclose(out.scaler.inverse(out.values), values, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(out.scaler.apply(values), out.values)


@pytest.mark.unit
class TestFeatureMatrix:
    """Test suite for the feature matrix container"""

    def test_rejects_misaligned_names(self):
        """Test that values and names must agree"""
        with pytest.raises(AlignmentError):
            FeatureMatrix(np.zeros((3, 2)), ["a"], [0, 1, 0], ["x", "y", "z"])

    def test_rejects_non_finite(self):
        """Test that NaN features are rejected"""
        with pytest.raises(AlignmentError):
            _matrix([[0.0, np.nan], [1.0, 2.0]])

    def test_rows_and_columns(self, rng):
        """Test row and column selection"""
        m = _matrix(rng.standard_normal((6, 3)), fold_of=np.array([0, 1, 2, 0, 1, 2]))
        sub = m.rows([1, 4]).columns(["f2", "f0"])
        assert sub.source_ids == ("w1", "w4")
        assert sub.feature_names == ("f2", "f0")
        np.testing.assert_array_equal(sub.values, m.values[[1, 4]][:, [2, 0]])
        np.testing.assert_array_equal(sub.fold_of, [1, 1])
        with pytest.raises(AlignmentError):
            m.columns(["missing"])

    def test_parquet_round_trip(self, tmp_path, rng):
        """Test saving and loading a matrix"""
        m = _matrix(rng.standard_normal((6, 3)), fold_of=np.array([0, 1, 2, 0, 1, 2]))
        loaded = load_feature_matrix(save_feature_matrix(m, tmp_path / "f" / "m.parquet"))
        np.testing.assert_array_equal(loaded.values, m.values)
        assert loaded.feature_names == m.feature_names
        assert loaded.source_ids == m.source_ids
        np.testing.assert_array_equal(loaded.fold_of, m.fold_of)
        np.testing.assert_array_equal(loaded.labels, m.labels)
