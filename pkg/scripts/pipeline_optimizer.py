"""
Pipeline optimizer

AIC-guided search for the signal-processing pipeline, per outer fold and on
that fold's training rows only:

1. tune EMD and wavelet hyperparameters, each stage applied alone;
2. freeze the tuned stages and score every ordered subset of stages,
   including the empty pipeline.

Every candidate is scored the same way: extract features, drop zero-variance
columns, standardize, fit a near-unregularized logistic regression and take
its training-set AIC.
"""

from __future__ import annotations

import itertools
import logging
import math
import threading
import warnings
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import pandas as pd
import joblib
from joblib import Parallel, delayed

from scripts.dsp_kernels import (
    MAX_SCALE_EXP,
    WAVELET_SUPPORT_FACTOR,
    EmdConfig,
    PipelineConfig,
    StageKind,
    TkeoConfig,
    WaveletConfig,
    WaveletType,
    cwt_band,
    cwt_terms,
    emd_band,
    emd_decompose,
    tkeo,
)
from scripts.errors import (
    AllFeaturesRemovedError,
    ConfigError,
    EmptyImfBandWarning,
    PipelineStageError,
    WaveletTruncationWarning,
)
from scripts.estimators import AIC_LAMBDA, LogisticRegressionClassifier, aic
from scripts.feature_extraction import FeatureCatalog, FeatureMatrix, extract_features, preprocess_fold
from scripts.signal_io import Dataset, SignalWindow

logger = logging.getLogger(__name__)

DEFAULT_STAGES = (StageKind.EMD, StageKind.WAVELET, StageKind.TKEO)
MAX_ORDERING_STAGES = 4
AIC_TIE_RTOL = 1e-9
_KIND_ORDER = {StageKind.EMD: 0, StageKind.WAVELET: 1, StageKind.TKEO: 2}


class GridMode(str, Enum):
    FULL = "full"
    SHRUNKEN = "shrunken"


@dataclass(frozen=True)
class StageGrid:
    emd: tuple
    wavelet: tuple
    grid_mode: GridMode = GridMode.FULL
    max_imfs: int = 10

    def __post_init__(self):
        object.__setattr__(self, "emd", tuple((int(lo), hi) for lo, hi in self.emd))
        object.__setattr__(
            self,
            "wavelet",
            tuple((int(lo), int(hi), WaveletType(t)) for lo, hi, t in self.wavelet),
        )
        object.__setattr__(self, "grid_mode", GridMode(self.grid_mode))
        if not self.emd or not self.wavelet:
            raise ConfigError("Stage grids must not be empty")
        # validates every point
        self.emd_configs()
        self.wavelet_configs()

    @classmethod
    def full(cls, max_imfs: int = 10) -> StageGrid:
        return cls(
            emd=[(lo, hi) for lo in range(6) for hi in (6, 7, 8, 9, None)],
            wavelet=[
                (lo, hi, t)
                for lo in range(4)
                for hi in (5, 7, 9)
                for t in (WaveletType.MORLET, WaveletType.GAUSSIAN)
            ],
            grid_mode=GridMode.FULL,
            max_imfs=max_imfs,
        )

    @classmethod
    def shrunken(cls, max_imfs: int = 10) -> StageGrid:
        # "second largest" IMF bound maps to max_imfs - 2
        return cls(
            emd=[(lo, hi) for lo in (0, 1) for hi in (max_imfs - 2, None)],
            wavelet=[
                (lo, MAX_SCALE_EXP, t)
                for lo in (0, 1)
                for t in (WaveletType.MORLET, WaveletType.GAUSSIAN)
            ],
            grid_mode=GridMode.SHRUNKEN,
            max_imfs=max_imfs,
        )

    @classmethod
    def for_mode(cls, mode, max_imfs: int = 10) -> StageGrid:
        if GridMode(mode) is GridMode.FULL:
            return cls.full(max_imfs)
        return cls.shrunken(max_imfs)

    def emd_configs(self) -> list[EmdConfig]:
        return [EmdConfig(lo, hi, max_imfs=self.max_imfs) for lo, hi in self.emd]

    def wavelet_configs(self) -> list[WaveletConfig]:
        return [WaveletConfig(lo, hi, t) for lo, hi, t in self.wavelet]

    def configs(self, kind: StageKind) -> list:
        if kind is StageKind.EMD:
            return self.emd_configs()
        if kind is StageKind.WAVELET:
            return self.wavelet_configs()
        return [TkeoConfig()]

    @property
    def size(self) -> int:
        return len(self.emd) + len(self.wavelet)


@dataclass(frozen=True)
class SearchRecord:
    fold: int
    search: str
    candidate: PipelineConfig
    aic: float
    rank: int
    n_features: int = 0
    skipped: bool = False
    empty_band_windows: int = 0

    def to_dict(self) -> dict:
        return {
            "fold": self.fold,
            "search": self.search,
            "candidate": self.candidate.to_text(),
            "aic": None if math.isinf(self.aic) else self.aic,
            "rank": self.rank,
            "n_features": self.n_features,
            "skipped": self.skipped,
            "empty_band_windows": self.empty_band_windows,
        }


# Feature cache


class FeatureCache:
    """
    Per-window feature vectors keyed by (window content hash, candidate, catalog).

    The content hash covers the samples and the sampling rate, and the
    candidate is keyed by its full stage configuration, so EMD sifting limits
    take part in the key. Store and counters are only touched under a lock.
    """

    def __init__(self):
        self._store: dict = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def __len__(self):
        return len(self._store)

    @staticmethod
    def window_key(w: SignalWindow) -> str:
        return joblib.hash((w.samples, w.sampling_rate_hz))

    def get(self, key: str, candidate: PipelineConfig, cat: FeatureCatalog):
        with self._lock:
            return self._store.get((key, candidate, cat))

    def put(self, key: str, candidate: PipelineConfig, cat: FeatureCatalog, vector: np.ndarray):
        with self._lock:
            self._store.setdefault((key, candidate, cat), vector)

    def missing(self, keys: Sequence[str], candidates: Sequence[PipelineConfig], cat) -> list[int]:
        """Positions in ``keys`` lacking a vector for some candidate."""
        out = []
        with self._lock:
            for i, key in enumerate(keys):
                if all((key, c, cat) in self._store for c in candidates):
                    self.hits += 1
                else:
                    self.misses += 1
                    out.append(i)
        return out


# Candidate processing


def _stage_key(stage) -> tuple:
    if stage.kind is StageKind.EMD:
        return ("EMD", stage.max_imfs, stage.sift_sd_threshold, stage.max_sift_iters)
    return (stage.kind.value,)


def _window_features(w: SignalWindow, candidates: Sequence[PipelineConfig], cat: FeatureCatalog):
    """
    Features of ``w`` under every candidate.

    Shared prefixes are processed once, and EMD decompositions / CWT term
    tables are reused across band choices of the same stage input.
    """
    processed: dict = {(): w.samples}
    decompositions: dict = {}
    wavelet_terms: dict = {}

    def run_stage(prefix: tuple, index: int, stage) -> np.ndarray:
        samples = process(prefix)
        try:
            if stage.kind is StageKind.EMD:
                key = (prefix, _stage_key(stage))
                if key not in decompositions:
                    decompositions[key] = [emd_decompose(ch, stage) for ch in samples]
                return np.vstack(
                    [emd_band(dec, stage.imf_lower, stage.imf_upper) for dec in decompositions[key]]
                )
            if stage.kind is StageKind.WAVELET:
                key = (prefix, stage.wavelet_type)
                if key not in wavelet_terms:
                    wavelet_terms[key] = [cwt_terms(ch, stage.wavelet_type) for ch in samples]
                return np.vstack([cwt_band(t, stage) for t in wavelet_terms[key]])
            return np.vstack([tkeo(ch) for ch in samples])
        except Exception as exc:
            raise PipelineStageError(index, stage.to_text(), exc) from exc

    def process(stages: tuple, keep: bool = True) -> np.ndarray:
        if stages in processed:
            return processed[stages]
        out = run_stage(stages[:-1], len(stages) - 1, stages[-1])
        if keep:
            processed[stages] = out
        return out

    features, empty_band = {}, []
    for cand in candidates:
        text = cand.to_text()
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", EmptyImfBandWarning)
            warnings.simplefilter("ignore", WaveletTruncationWarning)
            samples = process(cand.stages, keep=False)
        if any(issubclass(c.category, EmptyImfBandWarning) for c in caught):
            empty_band.append(text)
        features[text] = extract_features(w.with_samples(samples), cat)
    return w.source_id, features, empty_band


def _candidate_aic(values: np.ndarray, labels: np.ndarray, names, ids) -> tuple[float, int, bool]:
    m = FeatureMatrix(values=values, feature_names=names, labels=labels, source_ids=ids)
    rows = np.arange(m.n_rows)
    try:
        prepared = preprocess_fold(m, rows)
    except AllFeaturesRemovedError:
        return math.inf, 0, True
    model = LogisticRegressionClassifier(l2_lambda=AIC_LAMBDA).fit(prepared.values, m.labels)
    return aic(model, prepared.values, m.labels), prepared.n_features, False


def evaluate_candidates(
    d: Dataset,
    fold: int,
    candidates: Sequence[PipelineConfig],
    cat: FeatureCatalog,
    search: str,
    cache: FeatureCache | None = None,
    jobs: int = 1,
) -> list[SearchRecord]:
    """Unranked records (rank 0) for every candidate on the fold's training rows."""
    cache = FeatureCache() if cache is None else cache
    train = d.subset(d.train_rows(fold))
    texts = [c.to_text() for c in candidates]
    _warn_truncation(train, candidates)

    keys = [FeatureCache.window_key(w) for w in train]
    todo = cache.missing(keys, candidates, cat)
    empty_counts = dict.fromkeys(texts, 0)
    if todo:
        logger.debug(f"Fold {fold} {search}: processing {len(todo)} windows x {len(texts)} candidates")
        results = Parallel(n_jobs=jobs)(
            delayed(_window_features)(train[i], candidates, cat) for i in todo
        )
        for i, (_, features, empty_band) in zip(todo, results):
            for cand, text in zip(candidates, texts):
                cache.put(keys[i], cand, cat, features[text])
            for text in empty_band:
                empty_counts[text] += 1

    labels = np.array([int(w.label) for w in train])
    ids = [w.source_id for w in train]
    names = cat.names(train[0].n_channels)
    matrices = [np.vstack([cache.get(key, cand, cat) for key in keys]) for cand in candidates]
    scores = Parallel(n_jobs=jobs)(
        delayed(_candidate_aic)(values, labels, names, ids) for values in matrices
    )

    records = []
    for cand, text, (value, n_features, skipped) in zip(candidates, texts, scores):
        if skipped:
            logger.warning(f"Fold {fold} {search}: {text} skipped, all features zero-variance")
        if empty_counts[text]:
            logger.warning(f"Fold {fold} {search}: {text} has an empty IMF band in {empty_counts[text]} windows")
        logger.debug(f"Fold {fold} {search}: {text} AIC={value:.4f}")
        records.append(
            SearchRecord(fold, search, cand, value, 0, n_features, skipped, empty_counts[text])
        )
    return records


def _warn_truncation(windows, candidates):
    uses_wavelet = any(StageKind.WAVELET in c.kinds for c in candidates)
    if uses_wavelet and windows:
        n = windows[0].n_samples
        if WAVELET_SUPPORT_FACTOR * 2**MAX_SCALE_EXP > n:
            logger.warning(
                f"Windows of {n} samples are shorter than the wavelet support at "
                f"scale 2^{MAX_SCALE_EXP}; large-scale wavelets are truncated"
            )


# Ranking


def _upper_key(upper):
    return math.inf if upper is None else upper


def tie_break_key(cand: PipelineConfig, search: str) -> tuple:
    """Least filtering first among candidates of equal AIC."""
    if search in ("emd", "wavelet") and len(cand) == 1:
        stage = cand.stages[0]
        if stage.kind is StageKind.EMD:
            return (stage.imf_lower, -_upper_key(stage.imf_upper))
        if stage.kind is StageKind.WAVELET:
            width = stage.scale_upper_exp - stage.scale_lower_exp
            return (-width, stage.scale_lower_exp, stage.wavelet_type.value)
    return (len(cand), cand.to_text())


def rank_records(records: Sequence[SearchRecord]) -> list[SearchRecord]:
    """
    Assign ranks 1..n by AIC; AICs within a relative 1e-9 of a group's best
    form a tie group ordered by the search's tie-break key. Skipped
    candidates rank last.
    """
    ordered = sorted(records, key=lambda r: (r.aic, tie_break_key(r.candidate, r.search)))
    ranked, group = [], []

    def flush():
        group.sort(key=lambda r: tie_break_key(r.candidate, r.search))
        ranked.extend(group)
        group.clear()

    for rec in ordered:
        if group and not _tied(group[0].aic, rec.aic):
            flush()
        group.append(rec)
    flush()
    return [
        SearchRecord(r.fold, r.search, r.candidate, r.aic, i, r.n_features, r.skipped, r.empty_band_windows)
        for i, r in enumerate(ranked, start=1)
    ]


def _tied(best: float, value: float) -> bool:
    if math.isinf(best) or math.isinf(value):
        return math.isinf(best) and math.isinf(value)
    return abs(value - best) <= AIC_TIE_RTOL * max(abs(best), abs(value), 1.0)


def _winner(ranked: Sequence[SearchRecord], fold: int, search: str) -> SearchRecord:
    best = ranked[0]
    if best.skipped:
        raise AllFeaturesRemovedError(
            f"Fold {fold} {search}: every candidate lost all features to zero variance"
        )
    return best


# Search stages


@dataclass(frozen=True)
class StageTuning:
    fold: int
    best: dict
    records: list


def tune_stage_hyperparams(
    d: Dataset,
    fold: int,
    grid: StageGrid,
    cat: FeatureCatalog,
    cache: FeatureCache | None = None,
    jobs: int = 1,
    kinds: Iterable = (StageKind.EMD, StageKind.WAVELET),
) -> StageTuning:
    """Best EMD and wavelet configuration, each scored applied alone."""
    best, records = {}, []
    kinds = set(kinds)
    for kind, search in ((StageKind.EMD, "emd"), (StageKind.WAVELET, "wavelet")):
        if kind not in kinds:
            continue
        candidates = [PipelineConfig((cfg,)) for cfg in grid.configs(kind)]
        ranked = rank_records(evaluate_candidates(d, fold, candidates, cat, search, cache, jobs))
        winner = _winner(ranked, fold, search)
        best[kind] = winner.candidate.stages[0]
        records.extend(ranked)
        logger.info(f"Fold {fold}: best {kind.value} = {winner.candidate} (AIC {winner.aic:.2f})")
    return StageTuning(fold, best, records)


def _normalize_kinds(stages: Iterable) -> list[StageKind]:
    kinds = sorted({StageKind(s) for s in stages}, key=_KIND_ORDER.__getitem__)
    if len(kinds) > MAX_ORDERING_STAGES:
        raise ConfigError(f"At most {MAX_ORDERING_STAGES} stages can be ordered, got {len(kinds)}")
    return kinds


def _default_config(kind: StageKind):
    return {StageKind.EMD: EmdConfig(), StageKind.WAVELET: WaveletConfig()}.get(kind, TkeoConfig())


def enumerate_orderings(stages: Iterable, tuned: Mapping | None = None) -> list[PipelineConfig]:
    """All ordered arrangements of all subsets of ``stages``, empty pipeline first."""
    tuned = {} if tuned is None else tuned
    kinds = _normalize_kinds(stages)
    configs = {k: tuned.get(k, _default_config(k)) for k in kinds}
    return [
        PipelineConfig(tuple(configs[k] for k in perm))
        for size in range(len(kinds) + 1)
        for perm in itertools.permutations(kinds, size)
    ]


@dataclass(frozen=True)
class OrderingResult:
    fold: int
    winner: PipelineConfig
    records: list


def search_ordering(
    d: Dataset,
    fold: int,
    tuned: Mapping,
    cat: FeatureCatalog,
    stages: Iterable | None = None,
    cache: FeatureCache | None = None,
    jobs: int = 1,
) -> OrderingResult:
    """Score every ordering of the frozen stages; ties go to fewer stages."""
    if stages is None:
        stages = [*tuned.keys(), StageKind.TKEO]
    candidates = enumerate_orderings(stages, tuned)
    ranked = rank_records(evaluate_candidates(d, fold, candidates, cat, "ordering", cache, jobs))
    winner = _winner(ranked, fold, "ordering")
    logger.info(f"Fold {fold}: best ordering = {winner.candidate} (AIC {winner.aic:.2f})")
    return OrderingResult(fold, winner.candidate, ranked)


def joint_candidates(stages: Iterable, grid: StageGrid) -> list[PipelineConfig]:
    """Every ordering combined with every grid value of its stages."""
    kinds = _normalize_kinds(stages)
    out = []
    for size in range(len(kinds) + 1):
        for perm in itertools.permutations(kinds, size):
            for combo in itertools.product(*(grid.configs(k) for k in perm)):
                out.append(PipelineConfig(tuple(combo)))
    return out


def search_joint(
    d: Dataset,
    fold: int,
    grid: StageGrid,
    cat: FeatureCatalog,
    stages: Iterable = DEFAULT_STAGES,
    cache: FeatureCache | None = None,
    jobs: int = 1,
) -> OrderingResult:
    candidates = joint_candidates(stages, grid)
    logger.info(f"Fold {fold}: joint search over {len(candidates)} candidates")
    ranked = rank_records(evaluate_candidates(d, fold, candidates, cat, "joint", cache, jobs))
    winner = _winner(ranked, fold, "joint")
    return OrderingResult(fold, winner.candidate, ranked)


# Per fold / all folds


@dataclass(frozen=True)
class FoldOptimization:
    fold: int
    tuned: dict
    winner: PipelineConfig
    records: list

    def winner_aic(self) -> float:
        return min(r.aic for r in self.records if r.search in ("ordering", "joint"))


def optimize_fold(
    d: Dataset,
    fold: int,
    grid: StageGrid,
    cat: FeatureCatalog,
    stages: Iterable = DEFAULT_STAGES,
    joint_search: bool = False,
    cache: FeatureCache | None = None,
    jobs: int = 1,
) -> FoldOptimization:
    cache = FeatureCache() if cache is None else cache
    if joint_search:
        result = search_joint(d, fold, grid, cat, stages, cache, jobs)
        return FoldOptimization(fold, {}, result.winner, result.records)
    kinds = _normalize_kinds(stages)
    tuning = tune_stage_hyperparams(d, fold, grid, cat, cache, jobs, kinds)
    tuned = dict(tuning.best)
    ordering = search_ordering(d, fold, tuned, cat, kinds, cache, jobs)
    return FoldOptimization(fold, tuning.best, ordering.winner, tuning.records + ordering.records)


@dataclass(frozen=True)
class PipelineSearchReport:
    folds: list = field(default_factory=list)

    def winners(self) -> dict[int, PipelineConfig]:
        return {f.fold: f.winner for f in self.folds}

    def records(self) -> list[SearchRecord]:
        return [r for f in self.folds for r in f.records]

    def records_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.to_dict() for r in self.records()])

    def stage_table(self) -> pd.DataFrame:
        """Tuned stage hyperparameters per fold."""
        rows = []
        for f in self.folds:
            emd = f.tuned.get(StageKind.EMD)
            wav = f.tuned.get(StageKind.WAVELET)
            rows.append(
                {
                    "fold": f.fold,
                    "emd_imf_bounds": None if emd is None else f"{emd.imf_lower}, {emd.imf_upper}",
                    "wavelet_scales": None
                    if wav is None
                    else f"2^{wav.scale_lower_exp}, 2^{wav.scale_upper_exp}, {wav.wavelet_type.value}",
                }
            )
        return pd.DataFrame(rows)

    def ordering_table(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {"fold": f.fold, "pipeline": f.winner.to_text(), "aic": f.winner_aic()}
                for f in self.folds
            ]
        )

    def to_dict(self) -> dict:
        return {
            "winners": {str(k): v.to_text() for k, v in self.winners().items()},
            "tuned": {
                str(f.fold): {k.value: v.to_text() for k, v in f.tuned.items()}
                for f in self.folds
            },
            "records": [r.to_dict() for r in self.records()],
        }

    @classmethod
    def winners_from_dict(cls, payload: dict) -> dict[int, PipelineConfig]:
        return {int(k): PipelineConfig.parse(v) for k, v in payload["winners"].items()}


def optimize_pipeline(
    d: Dataset,
    grid: StageGrid,
    cat: FeatureCatalog,
    stages: Iterable = DEFAULT_STAGES,
    joint_search: bool = False,
    cache: FeatureCache | None = None,
    jobs: int = 1,
) -> PipelineSearchReport:
    cache = FeatureCache() if cache is None else cache
    folds = []
    for fold in range(d.n_folds):
        logger.info(f"--- Fold {fold + 1}/{d.n_folds} ---")
        folds.append(optimize_fold(d, fold, grid, cat, stages, joint_search, cache, jobs))
    logger.info(f"Feature cache: {len(cache)} entries, {cache.hits} window hits")
    return PipelineSearchReport(folds)
