"""
Tests for the AIC-guided signal-processing pipeline search
"""

import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from scripts import pipeline_optimizer
from scripts.dsp_kernels import (
    MAX_SCALE_EXP,
    EmdConfig,
    PipelineConfig,
    StageKind,
    TkeoConfig,
    WaveletConfig,
    WaveletType,
)
from scripts.errors import AllFeaturesRemovedError, ConfigError
from scripts.feature_extraction import FeatureCatalog
from scripts.pipeline_optimizer import (
    FeatureCache,
    GridMode,
    PipelineSearchReport,
    SearchRecord,
    StageGrid,
    enumerate_orderings,
    evaluate_candidates,
    joint_candidates,
    optimize_fold,
    optimize_pipeline,
    rank_records,
    search_ordering,
    tie_break_key,
    tune_stage_hyperparams,
)
from scripts.signal_io import Dataset, FaultClass, SignalWindow, assign_folds

TINY_GRID = StageGrid(
    emd=[(0, None), (1, None)],
    wavelet=[(0, 5, WaveletType.MORLET), (1, 5, WaveletType.GAUSSIAN)],
)


def _record(text, aic, search="emd", skipped=False):
    return SearchRecord(0, search, PipelineConfig.parse(text), aic, 0, skipped=skipped)


def _silent_dataset(n_per_class=6, n_samples=64):
    windows = [
        SignalWindow(np.zeros((1, n_samples)), 1000.0, label, f"{label.directory}/z_{i:02d}.csv")
        for label in (FaultClass.NORMAL, FaultClass.SHAFT_IMBALANCE)
        for i in range(n_per_class)
    ]
    return assign_folds(Dataset(windows), k=3, seed=0)


def _two_class_dataset(make_signal, n_per_class=30, seed=0):
    """Single-channel windows from ``make_signal(label_index, gen)``, 3 folds."""
    gen = np.random.default_rng(seed)
    windows = [
        SignalWindow(
            make_signal(index, gen)[None, :], 1000.0, label, f"{label.directory}/w_{i:03d}.csv"
        )
        for index, label in enumerate((FaultClass.NORMAL, FaultClass.OVERHANG_BEARING))
        for i in range(n_per_class)
    ]
    return assign_folds(Dataset(windows), k=3, seed=seed)


def _am_carrier_dataset(n_samples=512):
    """
    Classes differ only in the amplitude of an AM carrier at 2.2 rad/sample
    (above f_s/8); a slow tone and white noise are shared.
    """
    t = np.arange(n_samples)

    def make(index, gen):
        slow = np.sin(gen.uniform(0.03, 0.06) * t + gen.uniform(0, 2 * np.pi))
        envelope = 1.0 + 0.5 * np.cos(0.08 * t + gen.uniform(0, 2 * np.pi))
        carrier = (0.5, 1.5)[index] * envelope * np.cos(2.2 * t + gen.uniform(0, 2 * np.pi))
        return slow + carrier + 0.02 * gen.standard_normal(n_samples)

    return _two_class_dataset(make)


def _mirrored_tone_dataset(omega=0.5, n_samples=256, n_per_class=45):
    """
    Noisy tones at omega and pi - omega. Flipping every other sample maps one
    class onto the other, which leaves the Teager-Kaiser energy unchanged, so
    only the raw spectrum tells the classes apart.
    """
    t = np.arange(n_samples)

    def make(index, gen):
        w = (omega, np.pi - omega)[index]
        return np.sin(w * t + gen.uniform(0, 2 * np.pi)) + 0.1 * gen.standard_normal(n_samples)

    return _two_class_dataset(make, n_per_class)


@pytest.mark.unit
class TestStageGrid:
    """Test suite for stage hyperparameter grids"""

    def test_full_grid_sizes(self):
        """Test the full grid point counts"""
        grid = StageGrid.full()
        assert len(grid.emd_configs()) == 30
        assert len(grid.wavelet_configs()) == 24
        assert grid.size == 54

    def test_shrunken_grid(self):
        """Test the reduced grid used on long windows"""
        grid = StageGrid.shrunken(max_imfs=10)
        assert grid.grid_mode is GridMode.SHRUNKEN
        assert sorted(grid.emd, key=str) == sorted([(0, 8), (0, None), (1, 8), (1, None)], key=str)
        assert len(grid.wavelet) == 4
        assert {hi for _, hi, _ in grid.wavelet} == {MAX_SCALE_EXP}

    def test_for_mode(self):
        """Test selection by mode name"""
        assert StageGrid.for_mode("full").grid_mode is GridMode.FULL
        assert StageGrid.for_mode("shrunken").size == 8

    def test_configs_by_kind(self):
        """Test per-kind config lists"""
        assert TINY_GRID.configs(StageKind.TKEO) == [TkeoConfig()]
        assert TINY_GRID.configs(StageKind.EMD)[1].imf_lower == 1

    @pytest.mark.parametrize(
        "emd,wavelet",
        [([], [(0, 5, "morl")]), ([(0, None)], []), ([(3, 2)], [(0, 5, "morl")]), ([(0, None)], [(4, 2, "morl")])],
    )
    def test_invalid_grid(self, emd, wavelet):
        """Test that empty or invalid grid points are rejected"""
        with pytest.raises(ConfigError):
            StageGrid(emd=emd, wavelet=wavelet)


@pytest.mark.unit
class TestOrderings:
    """Test suite for candidate enumeration"""

    def test_three_stages(self):
        """Test every ordered subset of three stages"""
        orderings = enumerate_orderings([StageKind.EMD, StageKind.WAVELET, StageKind.TKEO])
        assert len(orderings) == 16
        assert len(orderings[0]) == 0
        assert len({o.to_text() for o in orderings}) == 16

    def test_two_stages(self):
        """Test every ordered subset of two stages"""
        texts = [o.to_text() for o in enumerate_orderings(["TKEO", "EMD"])]
        assert len(texts) == 5
        assert texts[0] == "NONE"

    def test_tuned_configs_are_used(self):
        """Test that frozen stages carry their tuned values"""
        tuned = {StageKind.EMD: EmdConfig(2, 7)}
        texts = {o.to_text() for o in enumerate_orderings([StageKind.EMD, StageKind.TKEO], tuned)}
        assert "EMD(2,7) | TKEO" in texts
        assert "TKEO | EMD(2,7)" in texts

    def test_joint_candidates(self):
        """Test the joint search space size"""
        assert len(joint_candidates([StageKind.EMD, StageKind.TKEO], TINY_GRID)) == 1 + 2 + 1 + 2 + 2


@pytest.mark.unit
class TestRanking:
    """Test suite for AIC ranking and tie-breaks"""

    def test_ties_prefer_least_filtering(self):
        """Test the EMD tie-break and that skipped candidates rank last"""
        ranked = rank_records(
            [
                _record("EMD(1,None)", 100.0),
                _record("EMD(0,None)", 100.0 + 1e-8),
                _record("EMD(0,7)", 99.0),
                _record("EMD(2,None)", math.inf, skipped=True),
            ]
        )
        assert [r.candidate.to_text() for r in ranked] == [
            "EMD(0,7)",
            "EMD(0,None)",
            "EMD(1,None)",
            "EMD(2,None)",
        ]
        assert [r.rank for r in ranked] == [1, 2, 3, 4]

    def test_distinct_aics_are_not_tied(self):
        """Test that differences above the tolerance order by AIC"""
        ranked = rank_records([_record("EMD(0,None)", 100.001), _record("EMD(1,None)", 100.0)])
        assert ranked[0].candidate.to_text() == "EMD(1,None)"

    def test_ordering_ties_prefer_fewer_stages(self):
        """Test that an equal-AIC empty pipeline wins"""
        ranked = rank_records(
            [_record("TKEO", 50.0, "ordering"), _record("NONE", 50.0, "ordering")]
        )
        assert ranked[0].candidate.to_text() == "NONE"

    def test_wavelet_ties_prefer_wider_band(self):
        """Test the wavelet tie-break key"""
        wide = PipelineConfig((WaveletConfig(0, 9, WaveletType.MORLET),))
        narrow = PipelineConfig((WaveletConfig(2, 5, WaveletType.MORLET),))
        assert tie_break_key(wide, "wavelet") < tie_break_key(narrow, "wavelet")

    def test_infinite_aic_serializes_as_null(self):
        """Test the record dictionary"""
        d = _record("TKEO", math.inf, "ordering", skipped=True).to_dict()
        assert d["aic"] is None
        assert d["candidate"] == "TKEO"


@pytest.mark.unit
class TestFeatureCache:
    """Test suite for the per-window feature cache"""

    def test_put_and_get(self, small_catalog):
        """Test that the first stored vector wins"""
        cache = FeatureCache()
        none = PipelineConfig(())
        cache.put("a", none, small_catalog, np.ones(3))
        cache.put("a", none, small_catalog, np.zeros(3))
        np.testing.assert_array_equal(cache.get("a", none, small_catalog), np.ones(3))
        assert cache.get("a", PipelineConfig((TkeoConfig(),)), small_catalog) is None
        assert len(cache) == 1

    def test_missing_windows(self, tone_dataset, small_catalog):
        """Test hit and miss counting"""
        cache = FeatureCache()
        none = PipelineConfig(())
        keys = [FeatureCache.window_key(w) for w in tone_dataset.windows[:3]]
        cache.put(keys[0], none, small_catalog, np.ones(3))
        assert cache.missing(keys, [none], small_catalog) == [1, 2]
        assert (cache.hits, cache.misses) == (1, 2)

    def test_key_follows_window_content(self, tone_dataset):
        """Test that the window key depends on samples and rate, not on the source id"""
        w = tone_dataset.windows[0]
        renamed = SignalWindow(w.samples.copy(), w.sampling_rate_hz, w.label, "elsewhere/copy.csv")
        assert FeatureCache.window_key(renamed) == FeatureCache.window_key(w)
        assert FeatureCache.window_key(w.with_samples(w.samples[:, ::2])) != FeatureCache.window_key(w)
        resampled = SignalWindow(w.samples, w.sampling_rate_hz / 2, w.label, w.source_id)
        assert FeatureCache.window_key(resampled) != FeatureCache.window_key(w)

    def test_sifting_limits_are_part_of_the_key(self, small_catalog):
        """Test that EMD candidates differing only in max_imfs do not share an entry"""
        cache = FeatureCache()
        wide = PipelineConfig((EmdConfig(0, None, max_imfs=10),))
        narrow = PipelineConfig((EmdConfig(0, None, max_imfs=3),))
        assert wide.to_text() == narrow.to_text()
        cache.put("a", wide, small_catalog, np.ones(3))
        assert cache.get("a", narrow, small_catalog) is None
        assert cache.missing(["a"], [narrow], small_catalog) == [0]

    def test_concurrent_counting(self, small_catalog):
        """Test that hit and miss counters add up under concurrent lookups"""
        cache = FeatureCache()
        none = PipelineConfig(())
        keys = [f"k{i}" for i in range(50)]
        for key in keys[:25]:
            cache.put(key, none, small_catalog, np.ones(3))
        with ThreadPoolExecutor(max_workers=8) as pool:
            list(pool.map(lambda _: cache.missing(keys, [none], small_catalog), range(40)))
        assert (cache.hits, cache.misses) == (25 * 40, 25 * 40)


@pytest.mark.dsp
class TestCandidateEvaluation:
    """Test suite for scoring candidates on training rows"""

    def test_only_training_rows_are_processed(self, mocker, tone_dataset, small_catalog):
        """Test that no held-out window is ever transformed"""
        spy = mocker.spy(pipeline_optimizer, "_window_features")
        candidates = [PipelineConfig(()), PipelineConfig((TkeoConfig(),))]
        evaluate_candidates(tone_dataset, 0, candidates, small_catalog, "ordering", jobs=1)
        seen = {c.args[0].source_id for c in spy.call_args_list}
        train = {tone_dataset.windows[i].source_id for i in tone_dataset.train_rows(0)}
        assert seen == train

    def test_cache_is_reused(self, tone_dataset, small_catalog):
        """Test that a second evaluation hits the cache"""
        cache = FeatureCache()
        candidates = [PipelineConfig(()), PipelineConfig((TkeoConfig(),))]
        first = evaluate_candidates(tone_dataset, 0, candidates, small_catalog, "ordering", cache)
        size = len(cache)
        second = evaluate_candidates(tone_dataset, 0, candidates, small_catalog, "ordering", cache)
        assert len(cache) == size == 2 * tone_dataset.train_rows(0).size
        assert [r.aic for r in first] == [r.aic for r in second]

    def test_empty_band_is_reported(self, small_catalog):
        """Test that an IMF band past the last IMF is flagged per window"""
        w = SignalWindow(np.linspace(0.0, 1.0, 256)[None, :], 1000.0, FaultClass.NORMAL, "normal/r.csv")
        source_id, features, empty = pipeline_optimizer._window_features(
            w, [PipelineConfig.parse("EMD(1,None)"), PipelineConfig(())], small_catalog
        )
        assert source_id == "normal/r.csv"
        assert empty == ["EMD(1,None)"]
        assert set(features) == {"EMD(1,None)", "NONE"}

    def test_all_features_removed(self, small_catalog):
        """Test that silent windows leave no candidate to choose"""
        d = _silent_dataset()
        with pytest.raises(AllFeaturesRemovedError):
            search_ordering(d, 0, {}, small_catalog, stages=[StageKind.TKEO])


@pytest.mark.slow
@pytest.mark.dsp
class TestOptimizeFold:
    """Test suite for the two-phase per-fold search"""

    def test_two_phase_search(self, tone_dataset, small_catalog):
        """Test record counts and that the winner is a scored ordering"""
        result = optimize_fold(tone_dataset, 0, TINY_GRID, small_catalog)
        searches = [r.search for r in result.records]
        assert searches.count("emd") == 2
        assert searches.count("wavelet") == 2
        assert searches.count("ordering") == 16
        assert set(result.tuned) == {StageKind.EMD, StageKind.WAVELET}
        candidates = {o.to_text() for o in enumerate_orderings(list(StageKind), result.tuned)}
        assert result.winner.to_text() in candidates
        best = min(r.aic for r in result.records if r.search == "ordering")
        assert result.winner_aic() == best

    def test_search_is_deterministic(self, tone_dataset, small_catalog):
        """Test that repeated searches agree"""
        a = optimize_fold(tone_dataset, 1, TINY_GRID, small_catalog)
        b = optimize_fold(tone_dataset, 1, TINY_GRID, small_catalog)
        assert a.winner.to_text() == b.winner.to_text()
        assert [r.to_dict() for r in a.records] == [r.to_dict() for r in b.records]

    def test_restricted_stages(self, tone_dataset, small_catalog):
        """Test that only the searched stage kinds are tuned"""
        result = optimize_fold(tone_dataset, 0, TINY_GRID, small_catalog, stages=[StageKind.EMD])
        assert set(result.tuned) == {StageKind.EMD}
        assert [r.search for r in result.records].count("ordering") == 2

    def test_joint_search_and_report(self, tone_dataset, small_catalog):
        """Test the joint search and the serialized report"""
        result = optimize_fold(
            tone_dataset, 2, TINY_GRID, small_catalog, stages=[StageKind.TKEO], joint_search=True
        )
        assert result.tuned == {}
        assert len(result.records) == 2
        report = PipelineSearchReport([result])
        payload = report.to_dict()
        assert payload["winners"] == {"2": result.winner.to_text()}
        restored = PipelineSearchReport.winners_from_dict(payload)
        assert restored[2].to_text() == result.winner.to_text()
        assert report.stage_table()["emd_imf_bounds"].tolist() == [None]
        assert len(report.records_frame()) == 2

    def test_stage_tuning_alone(self, tone_dataset, small_catalog):
        """Test that one stage kind is tuned over its grid points only"""
        tuning = tune_stage_hyperparams(tone_dataset, 1, TINY_GRID, small_catalog, kinds=[StageKind.EMD])
        assert set(tuning.best) == {StageKind.EMD}
        assert tuning.best[StageKind.EMD] in TINY_GRID.configs(StageKind.EMD)
        assert [r.rank for r in tuning.records] == [1, 2]
        assert tuning.records[0].candidate.stages[0] == tuning.best[StageKind.EMD]

    def test_every_fold_is_searched(self, tone_dataset, small_catalog):
        """Test the all-fold search and cache reuse across overlapping training rows"""
        cache = FeatureCache()
        report = optimize_pipeline(tone_dataset, TINY_GRID, small_catalog, stages=[StageKind.TKEO], cache=cache)
        assert set(report.winners()) == {0, 1, 2}
        assert cache.hits > 0


@pytest.mark.slow
@pytest.mark.dsp
class TestSearchOutcomes:
    """Test suite for search winners on datasets with a known best answer"""

    CATALOG = FeatureCatalog(
        n_bands=8, features=("spectral_centroid", "spectral_spread", "spectral_flatness")
    )

    def test_emd_keeps_the_high_frequency_mode(self):
        """Test that the EMD winner keeps IMF 0 when the classes differ only at high frequency"""
        d = _am_carrier_dataset()
        grid = StageGrid(emd=[(0, None), (1, None), (2, None)], wavelet=[(0, 5, WaveletType.MORLET)])
        for fold in range(d.n_folds):
            tuning = tune_stage_hyperparams(d, fold, grid, self.CATALOG, kinds=[StageKind.EMD])
            assert tuning.best[StageKind.EMD].imf_lower == 0
            ranked = {r.candidate.to_text(): r.aic for r in tuning.records}
            assert ranked["EMD(0,None)"] < ranked["EMD(2,None)"]

    def test_no_processing_beats_energy_operator(self):
        """Test that the empty pipeline wins when the energy operator hides the class difference"""
        d = _mirrored_tone_dataset()
        cat = FeatureCatalog(n_bands=4, features=self.CATALOG.features)
        for fold in range(d.n_folds):
            result = search_ordering(d, fold, {}, cat, stages=[StageKind.TKEO])
            assert result.winner.to_text() == "NONE"
            aics = {r.candidate.to_text(): r.aic for r in result.records}
            assert not any(r.skipped for r in result.records)
            assert aics["TKEO"] - aics["NONE"] > 10.0

    def test_winner_has_a_plausible_shape(self):
        """Test tuned-stage formats and winners over every fold of a full two-phase search"""
        d = _am_carrier_dataset()
        grid = StageGrid(
            emd=[(0, None), (1, None)],
            wavelet=[(0, 5, WaveletType.MORLET), (2, 5, WaveletType.GAUSSIAN)],
        )
        report = optimize_pipeline(d, grid, self.CATALOG, stages=[StageKind.EMD, StageKind.WAVELET])
        table = report.stage_table()
        assert table["fold"].tolist() == [0, 1, 2]
        assert table["emd_imf_bounds"].str.fullmatch(r"[01], None").all()
        assert table["wavelet_scales"].str.fullmatch(r"2\^[02], 2\^5, (morl|gaus)").all()
        for f in report.folds:
            orderings = enumerate_orderings([StageKind.EMD, StageKind.WAVELET], f.tuned)
            assert f.winner.to_text() in {o.to_text() for o in orderings}
            assert len(set(f.winner.kinds)) == len(f.winner)
            assert f.winner_aic() == min(r.aic for r in f.records if r.search == "ordering")
        assert report.ordering_table()["pipeline"].tolist() == [w.to_text() for w in report.winners().values()]
