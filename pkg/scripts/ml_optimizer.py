"""
ML optimizer

Per outer fold: recursive feature elimination with inner stratified
cross-validation on an annealing step schedule, exhaustive hyperparameter
grid search (optuna GridSampler), a final fit on the fold's training rows
and out-of-fold probabilities for its test rows.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np
import optuna
import pandas as pd
from joblib import Parallel, delayed
from sklearn.metrics import f1_score
from sklearn.model_selection import StratifiedKFold

from scripts.errors import AlignmentError, ConfigError, NumericalError
from scripts.estimators import (
    ESTIMATOR_KINDS,
    MetricsReport,
    compute_metrics,
    feature_importance,
    full_proba,
    make_estimator,
)
from scripts.feature_extraction import FeatureMatrix, preprocess_fold

logger = logging.getLogger(__name__)

DEFAULT_GRIDS = {
    "logreg": {"l2_lambda": [1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0]},
    "gbt": {"max_depth": [3, 6], "n_trees": [100, 300], "l2_leaf": [1.0, 3.0]},
}
DEFAULT_RFECV_PARAMS = {
    "logreg": {"l2_lambda": 1.0},
    "gbt": {"max_depth": 3, "n_trees": 30, "l2_leaf": 3.0},
}


@dataclass(frozen=True)
class RfecvSchedule:
    """step[i] applies while the feature count exceeds threshold[i]."""

    thresholds: tuple = (700, 350, 125, 75, 37, 17, 8)
    steps: tuple = (400, 100, 50, 25, 12, 6, 3)

    def __post_init__(self):
        object.__setattr__(self, "thresholds", tuple(int(t) for t in self.thresholds))
        object.__setattr__(self, "steps", tuple(int(s) for s in self.steps))
        if not self.thresholds or len(self.thresholds) != len(self.steps):
            raise ConfigError("RFECV thresholds and steps must be non-empty and equally long")
        if any(a <= b for a, b in zip(self.thresholds, self.thresholds[1:])):
            raise ConfigError(f"RFECV thresholds must strictly decrease: {self.thresholds}")
        if min(self.steps) < 1:
            raise ConfigError(f"RFECV steps must be >= 1: {self.steps}")

    def step_for(self, count: int) -> int:
        for threshold, step in zip(self.thresholds, self.steps):
            if count > threshold:
                return step
        # at or below every threshold the last step keeps applying
        return self.steps[-1]

    def feature_counts(self, start: int, min_features: int = 1) -> list[int]:
        """Feature counts visited by elimination from ``start`` down to ``min_features``."""
        counts = [start]
        while counts[-1] > min_features:
            counts.append(max(counts[-1] - self.step_for(counts[-1]), min_features))
        return counts


@dataclass(frozen=True)
class TraceEntry:
    n_features: int
    score: float
    failed: bool = False


@dataclass(frozen=True)
class TuneResult:
    estimator: str
    selected_features: list
    best_hyperparams: dict
    cv_score_trace: list
    best_score: float = math.nan

    def trace_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {"n_features": t.n_features, "mean_f1_weighted": t.score, "failed": t.failed}
                for t in self.cv_score_trace
            ]
        )


def _check_kind(kind: str):
    if kind not in ESTIMATOR_KINDS:
        raise ConfigError(f"Unknown estimator kind {kind!r}; expected one of {ESTIMATOR_KINDS}")


def _inner_splits(y: np.ndarray, inner_k: int, seed: int) -> list:
    skf = StratifiedKFold(n_splits=inner_k, shuffle=True, random_state=seed)
    return list(skf.split(np.zeros(y.size), y))


def _fold_f1(X, y, kind, params, train_idx, val_idx) -> float:
    model = make_estimator(kind, **params).fit(X[train_idx], y[train_idx])
    return float(f1_score(y[val_idx], model.predict(X[val_idx]), average="weighted", zero_division=0))


def cv_score(X, y, kind: str, params: Mapping, splits, jobs: int = 1) -> tuple[float, bool]:
    """Mean weighted f1 over inner folds; (0.0, True) when any fit fails."""
    try:
        scores = Parallel(n_jobs=jobs)(
            delayed(_fold_f1)(X, y, kind, dict(params), tr, va) for tr, va in splits
        )
    except (NumericalError, ValueError) as exc:
        logger.warning(f"{kind} {dict(params)} failed in an inner fold: {exc}")
        return 0.0, True
    return float(np.mean(scores)), False


def rfecv(
    rows: FeatureMatrix,
    estimator_kind: str,
    schedule: RfecvSchedule = RfecvSchedule(),
    inner_k: int = 3,
    seed: int = 42,
    params: Mapping | None = None,
    min_features: int = 1,
    jobs: int = 1,
) -> TuneResult:
    """
    Recursive feature elimination scored by inner-CV weighted f1.

    Importance comes from a fit on all of ``rows``; the lowest-ranked
    features (stable order) are dropped by the schedule's step. A failed
    importance fit ends the elimination at the current set. The selected set
    is the one with the best mean f1; ties go to the smaller set.
    """
    _check_kind(estimator_kind)
    if rows.n_features < 1:
        raise ConfigError("rfecv needs at least one feature")
    params = dict(DEFAULT_RFECV_PARAMS[estimator_kind] if params is None else params)
    X, y = rows.values, rows.labels
    splits = _inner_splits(y, inner_k, seed)

    current = np.arange(rows.n_features)
    trace, subsets = [], []
    while True:
        score, failed = cv_score(X[:, current], y, estimator_kind, params, splits, jobs)
        trace.append(TraceEntry(int(current.size), score, failed))
        subsets.append(current)
        logger.debug(f"RFECV {estimator_kind}: {current.size} features, f1={score:.4f}")
        if current.size <= min_features:
            break
        try:
            model = make_estimator(estimator_kind, **params).fit(X[:, current], y)
        except (NumericalError, ValueError) as exc:
            logger.warning(
                f"RFECV {estimator_kind}: importance fit failed at {current.size} features, "
                f"stopping: {exc}"
            )
            break
        order = np.argsort(feature_importance(model), kind="stable")
        drop = min(schedule.step_for(int(current.size)), int(current.size) - min_features)
        keep = np.sort(order[drop:])
        current = current[keep]

    best = max(range(len(trace)), key=lambda i: (trace[i].score, -trace[i].n_features))
    selected = [rows.feature_names[i] for i in subsets[best]]
    logger.info(
        f"RFECV {estimator_kind}: kept {len(selected)} of {rows.n_features} features "
        f"(mean f1 {trace[best].score:.4f})"
    )
    return TuneResult(estimator_kind, selected, params, trace, trace[best].score)


def regularization_strength(kind: str, params: Mapping) -> tuple:
    """Larger tuple = stronger regularization."""
    if kind == "logreg":
        return (params.get("l2_lambda", 0.0),)
    return (-params.get("max_depth", 0), params.get("l2_leaf", 0.0), -params.get("n_trees", 0))


def tune_classifier(
    rows: FeatureMatrix,
    estimator_kind: str,
    grid: Mapping | None = None,
    inner_k: int = 3,
    seed: int = 42,
    jobs: int = 1,
) -> TuneResult:
    """Exhaustive grid search by inner-CV weighted f1; ties go to stronger regularization."""
    _check_kind(estimator_kind)
    grid = DEFAULT_GRIDS[estimator_kind] if grid is None else grid
    search_space = {k: list(v) for k, v in grid.items()}
    if not search_space or any(not v for v in search_space.values()):
        raise ConfigError(f"Hyperparameter grid must be non-empty: {grid}")
    n_trials = math.prod(len(v) for v in search_space.values())
    X, y = rows.values, rows.labels
    splits = _inner_splits(y, inner_k, seed)

    def objective(trial):
        params = {k: trial.suggest_categorical(k, v) for k, v in search_space.items()}
        score, failed = cv_score(X, y, estimator_kind, params, splits, jobs)
        trial.set_user_attr("failed", failed)
        return score

    study = optuna.create_study(
        direction="maximize",
        sampler=optuna.samplers.GridSampler(search_space, seed=seed),
        study_name=f"{estimator_kind}_grid",
    )
    study.optimize(objective, n_trials=n_trials)

    trials = [t for t in study.trials if t.value is not None]
    best = max(
        trials,
        key=lambda t: (t.value, regularization_strength(estimator_kind, t.params)),
    )
    logger.info(f"Best {estimator_kind} params: {best.params} (mean f1 {best.value:.4f})")
    trace = [TraceEntry(rows.n_features, float(best.value), bool(best.user_attrs.get("failed")))]
    return TuneResult(estimator_kind, list(rows.feature_names), dict(best.params), trace, float(best.value))


# Outer folds


@dataclass(frozen=True)
class TrainingPlan:
    estimator: str
    grid: dict | None = None
    rfecv_params: dict | None = None
    schedule: RfecvSchedule = field(default_factory=RfecvSchedule)
    inner_k: int = 3
    seed: int = 42
    min_features: int = 1


@dataclass(frozen=True)
class FoldTraining:
    fold: int
    estimator: str
    selection: TuneResult
    tuning: TuneResult
    model: object
    test_ids: tuple
    test_labels: np.ndarray
    proba: np.ndarray
    metrics: MetricsReport


def train_fold(
    m: FeatureMatrix, fold: int, plan: TrainingPlan, n_classes: int | None = None, jobs: int = 1
) -> FoldTraining:
    """rfecv -> tune_classifier -> final fit on the fold's training rows -> test probabilities."""
    if m.fold_of is None:
        raise AlignmentError("FeatureMatrix has no fold assignment")
    n_classes = int(m.labels.max()) + 1 if n_classes is None else n_classes
    train_rows = np.flatnonzero(m.fold_of != fold)
    test_rows = np.flatnonzero(m.fold_of == fold)
    if train_rows.size == 0 or test_rows.size == 0:
        raise AlignmentError(f"Fold {fold} has an empty training or test part")

    prepared = preprocess_fold(m, train_rows)
    train = prepared.rows(train_rows)
    selection = rfecv(
        train, plan.estimator, plan.schedule, plan.inner_k, plan.seed,
        plan.rfecv_params, plan.min_features, jobs,
    )
    train_sel = train.columns(selection.selected_features)
    tuning = tune_classifier(train_sel, plan.estimator, plan.grid, plan.inner_k, plan.seed, jobs)

    model = make_estimator(plan.estimator, **tuning.best_hyperparams).fit(
        train_sel.values, train_sel.labels
    )
    test = prepared.rows(test_rows).columns(selection.selected_features)
    proba = full_proba(model, test.values, n_classes)
    metrics = compute_metrics(proba, test.labels)
    logger.info(
        f"Fold {fold} {plan.estimator}: {len(selection.selected_features)} features, "
        f"f1={metrics.f1_weighted:.4f} mae={metrics.mae:.4f}"
    )
    return FoldTraining(
        fold, plan.estimator, selection, tuning, model, test.source_ids, test.labels, proba, metrics
    )


@dataclass(frozen=True)
class TrainingReport:
    estimator: str
    folds: list

    def oof(self) -> tuple[list, np.ndarray, np.ndarray]:
        """Out-of-fold (source_ids, labels, proba) ordered by source id."""
        ids = [i for f in self.folds for i in f.test_ids]
        labels = np.concatenate([f.test_labels for f in self.folds])
        proba = np.vstack([f.proba for f in self.folds])
        if len(set(ids)) != len(ids):
            raise AlignmentError("A window appears in more than one test fold")
        order = np.argsort(np.asarray(ids, dtype=object), kind="stable")
        return [ids[i] for i in order], labels[order], proba[order]

    def pooled_metrics(self) -> MetricsReport:
        _, labels, proba = self.oof()
        return compute_metrics(proba, labels)

    def oof_frame(self) -> pd.DataFrame:
        ids, labels, proba = self.oof()
        frame = pd.DataFrame(proba, columns=[f"p_{c}" for c in range(proba.shape[1])])
        frame.insert(0, "source_id", ids)
        frame.insert(1, "label", labels)
        return frame

    def selection_table(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {
                    "fold": f.fold,
                    "estimator": self.estimator,
                    "n_features": len(f.selection.selected_features),
                    **{f"param_{k}": v for k, v in sorted(f.tuning.best_hyperparams.items())},
                }
                for f in self.folds
            ]
        )

    def metrics_table(self) -> pd.DataFrame:
        rows = []
        for name, report in [(str(f.fold), f.metrics) for f in self.folds] + [("pooled", self.pooled_metrics())]:
            d = report.to_dict()
            rows.append(
                {"fold": name, "estimator": self.estimator}
                | {k: d[k] for k in ("f1_weighted", "precision_weighted", "recall_weighted", "accuracy", "mae")}
            )
        return pd.DataFrame(rows)

    def trace_frame(self) -> pd.DataFrame:
        frames = []
        for f in self.folds:
            t = f.selection.trace_frame()
            t.insert(0, "fold", f.fold)
            frames.append(t)
        return pd.concat(frames, ignore_index=True)


def run_training(
    matrices: Mapping[int, FeatureMatrix] | Sequence[FeatureMatrix],
    plan: TrainingPlan,
    n_classes: int | None = None,
    jobs: int = 1,
) -> TrainingReport:
    """Train every outer fold; ``matrices[fold]`` holds that fold's processed features."""
    if not isinstance(matrices, Mapping):
        matrices = dict(enumerate(matrices))
    if n_classes is None:
        n_classes = max(int(m.labels.max()) for m in matrices.values()) + 1
    folds = []
    for fold in sorted(matrices):
        logger.info(f"--- Fold {fold + 1}/{len(matrices)} ({plan.estimator}) ---")
        folds.append(train_fold(matrices[fold], fold, plan, n_classes, jobs))
    return TrainingReport(plan.estimator, folds)
