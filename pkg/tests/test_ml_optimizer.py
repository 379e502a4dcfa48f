"""
Tests for feature elimination, grid tuning and outer-fold training
"""

from types import SimpleNamespace

import numpy as np
import pytest

from scripts import ml_optimizer
from scripts.errors import AlignmentError, ConfigError, NumericalError
from scripts.feature_extraction import FeatureMatrix
from scripts.ml_optimizer import (
    RfecvSchedule,
    TrainingPlan,
    TrainingReport,
    cv_score,
    regularization_strength,
    rfecv,
    run_training,
    train_fold,
    tune_classifier,
)
from tests.conftest import make_blobs_matrix

LOGREG_PLAN = TrainingPlan("logreg", grid={"l2_lambda": [0.1, 1.0]})


def _separable(n_per_class=15):
    gen = np.random.default_rng(3)
    labels = np.repeat([0, 1], n_per_class)
    values = gen.standard_normal((2 * n_per_class, 2))
    values[:, 0] += np.where(labels == 1, 10.0, -10.0)
    return FeatureMatrix(values, ["a", "b"], labels, [f"s{i}" for i in range(labels.size)])


@pytest.mark.modeling
class TestRfecvSchedule:
    """Test suite for the annealing elimination schedule"""

    @pytest.mark.parametrize(
        "count,step", [(1000, 400), (701, 400), (700, 100), (351, 100), (126, 50), (9, 3), (8, 3), (5, 3)]
    )
    def test_step_for(self, count, step):
        """Test the step applied at a feature count"""
        assert RfecvSchedule().step_for(count) == step

    def test_feature_counts_stop_at_one(self):
        """Test the visited counts below the last threshold"""
        assert RfecvSchedule().feature_counts(8) == [8, 5, 2, 1]

    def test_feature_counts_from_full_catalog(self):
        """Test the visited counts from the default feature dimension"""
        counts = RfecvSchedule().feature_counts(474)
        assert counts[:4] == [474, 374, 274, 224]
        assert counts[-1] == 1
        assert all(a > b for a, b in zip(counts, counts[1:]))

    @pytest.mark.parametrize(
        "thresholds,steps", [((8, 17), (3, 6)), ((10,), (0,)), ((), ()), ((10, 5), (2,))]
    )
    def test_invalid_schedule(self, thresholds, steps):
        """Test schedule validation"""
        with pytest.raises(ConfigError):
            RfecvSchedule(thresholds, steps)


@pytest.mark.modeling
class TestRfecv:
    """Test suite for recursive feature elimination"""

    def test_trace_follows_schedule(self, blobs_matrix):
        """Test the visited feature counts and the selected subset"""
        result = rfecv(blobs_matrix, "logreg")
        assert [t.n_features for t in result.cv_score_trace] == [10, 7, 4, 1]
        assert set(result.selected_features) & {"x0", "x1", "x2"}
        assert result.best_score == max(t.score for t in result.cv_score_trace)

    def test_unit_step_visits_every_count(self, blobs_matrix):
        """Test a one-feature-at-a-time schedule"""
        result = rfecv(blobs_matrix, "logreg", RfecvSchedule((1,), (1,)))
        assert [t.n_features for t in result.cv_score_trace] == list(range(10, 0, -1))
        assert set(result.selected_features) <= set(blobs_matrix.feature_names)

    def test_min_features_floor(self, blobs_matrix):
        """Test that elimination stops at min_features"""
        result = rfecv(blobs_matrix, "logreg", min_features=5)
        assert [t.n_features for t in result.cv_score_trace] == [10, 7, 5]
        assert len(result.selected_features) >= 5

    def test_trace_frame(self, blobs_matrix):
        """Test the tabular trace"""
        frame = rfecv(blobs_matrix, "logreg").trace_frame()
        assert list(frame.columns) == ["n_features", "mean_f1_weighted", "failed"]
        assert not frame["failed"].any()

    @pytest.mark.slow
    def test_informative_features_are_recovered(self):
        """Test selection on a wide matrix with 20 informative and 200 noise columns"""
        m = make_blobs_matrix(n_per_class=40, n_informative=20, n_noise=200, seed=11)
        result = rfecv(m, "logreg")
        assert [t.n_features for t in result.cv_score_trace] == RfecvSchedule().feature_counts(220)
        informative = [f for f in result.selected_features if f.startswith("x")]
        assert len(informative) >= 0.8 * len(result.selected_features)

    def test_unknown_estimator(self, blobs_matrix):
        """Test that an unknown estimator kind is rejected"""
        with pytest.raises(ConfigError):
            rfecv(blobs_matrix, "svm")

    def test_failed_importance_fit_stops_elimination(self, mocker, blobs_matrix):
        """Test that a failing full-data fit keeps the set scored so far"""
        make = ml_optimizer.make_estimator

        def failing_on_all_rows(kind, **params):
            model = make(kind, **params)
            fit = model.fit

            def fit_or_fail(X, y):
                if X.shape[0] == blobs_matrix.n_rows:
                    raise NumericalError("diverged")
                return fit(X, y)

            model.fit = fit_or_fail
            return model

        mocker.patch.object(ml_optimizer, "make_estimator", side_effect=failing_on_all_rows)
        result = rfecv(blobs_matrix, "logreg")
        assert [t.n_features for t in result.cv_score_trace] == [10]
        assert not result.cv_score_trace[0].failed
        assert result.selected_features == list(blobs_matrix.feature_names)


@pytest.mark.modeling
class TestTuning:
    """Test suite for inner-CV scoring and grid search"""

    def test_ties_prefer_stronger_regularization(self):
        """Test the tie-break on perfectly separable data"""
        result = tune_classifier(_separable(), "logreg", {"l2_lambda": [0.01, 0.1, 1.0]})
        assert result.best_score == 1.0
        assert result.best_hyperparams == {"l2_lambda": 1.0}

    def test_every_grid_point_is_scored(self, mocker):
        """Test that the grid search is exhaustive"""
        spy = mocker.spy(ml_optimizer, "cv_score")
        tune_classifier(_separable(), "logreg", {"l2_lambda": [0.01, 0.1, 1.0]})
        assert spy.call_count == 3
        assert sorted(c.args[3]["l2_lambda"] for c in spy.call_args_list) == [0.01, 0.1, 1.0]

    def test_failed_fit_scores_zero(self, mocker, blobs_matrix):
        """Test that a numerical failure in an inner fold scores (0.0, True)"""
        mocker.patch.object(ml_optimizer, "_fold_f1", side_effect=NumericalError("diverged"))
        splits = ml_optimizer._inner_splits(blobs_matrix.labels, 3, 42)
        assert cv_score(blobs_matrix.values, blobs_matrix.labels, "logreg", {}, splits) == (0.0, True)

    def test_empty_grid(self, blobs_matrix):
        """Test that an empty grid is rejected"""
        with pytest.raises(ConfigError):
            tune_classifier(blobs_matrix, "logreg", {"l2_lambda": []})

    def test_regularization_order(self):
        """Test the regularization ordering used for tie-breaks"""
        assert regularization_strength("logreg", {"l2_lambda": 10.0}) > regularization_strength(
            "logreg", {"l2_lambda": 0.1}
        )
        shallow = regularization_strength("gbt", {"max_depth": 3, "n_trees": 100, "l2_leaf": 1.0})
        deep = regularization_strength("gbt", {"max_depth": 6, "n_trees": 100, "l2_leaf": 1.0})
        assert shallow > deep


@pytest.mark.modeling
class TestOuterFolds:
    """Test suite for per-fold training and out-of-fold reports"""

    def test_selection_sees_training_rows_only(self, mocker, blobs_matrix):
        """Test that feature elimination never receives test rows"""
        spy = mocker.spy(ml_optimizer, "rfecv")
        result = train_fold(blobs_matrix, 0, LOGREG_PLAN)
        rows = spy.call_args.args[0]
        expected = {s for s, f in zip(blobs_matrix.source_ids, blobs_matrix.fold_of) if f != 0}
        assert set(rows.source_ids) == expected
        assert not set(rows.source_ids) & set(result.test_ids)

    def test_fold_probabilities(self, blobs_matrix):
        """Test the shape of a fold's test probabilities"""
        result = train_fold(blobs_matrix, 1, LOGREG_PLAN)
        assert result.proba.shape == (30, 3)
        np.testing.assert_allclose(result.proba.sum(axis=1), 1.0)
        assert result.metrics.f1_weighted > 0.7

    def test_fold_without_assignment(self, blobs_matrix):
        """Test that an unassigned matrix cannot be trained per fold"""
        m = FeatureMatrix(
            blobs_matrix.values, blobs_matrix.feature_names, blobs_matrix.labels, blobs_matrix.source_ids
        )
        with pytest.raises(AlignmentError):
            train_fold(m, 0, LOGREG_PLAN)

    def test_out_of_fold_covers_each_row_once(self, blobs_matrix):
        """Test the pooled out-of-fold predictions"""
        report = run_training([blobs_matrix] * 3, LOGREG_PLAN)
        ids, labels, proba = report.oof()
        assert ids == sorted(blobs_matrix.source_ids)
        assert proba.shape == (90, 3)
        frame = report.oof_frame()
        assert list(frame.columns) == ["source_id", "label", "p_0", "p_1", "p_2"]
        assert report.pooled_metrics().f1_weighted > 0.7

    def test_report_tables(self, blobs_matrix):
        """Test the per-fold tables"""
        report = run_training({0: blobs_matrix, 1: blobs_matrix, 2: blobs_matrix}, LOGREG_PLAN)
        assert len(report.selection_table()) == 3
        assert "param_l2_lambda" in report.selection_table().columns
        assert report.metrics_table()["fold"].tolist() == ["0", "1", "2", "pooled"]
        assert report.trace_frame()["fold"].nunique() == 3

    def test_duplicate_test_rows(self):
        """Test that a window tested twice is an alignment error"""
        fold = SimpleNamespace(test_ids=("a", "b"), test_labels=np.array([0, 1]), proba=np.eye(2))
        other = SimpleNamespace(test_ids=("b",), test_labels=np.array([1]), proba=np.eye(2)[1:])
        with pytest.raises(AlignmentError):
            TrainingReport("logreg", [fold, other]).oof()

    def test_noise_is_not_learnable(self):
        """Test that pure noise scores near chance out of fold"""
        m = make_blobs_matrix(n_per_class=50, n_informative=0, n_noise=10, seed=5)
        report = run_training([m] * 3, LOGREG_PLAN)
        assert report.pooled_metrics().accuracy < 1 / 3 + 0.12

    @pytest.mark.slow
    def test_boosted_trees_train(self, blobs_matrix):
        """Test a small boosted-tree configuration end to end"""
        plan = TrainingPlan(
            "gbt",
            grid={"max_depth": [2], "n_trees": [10], "l2_leaf": [1.0]},
            rfecv_params={"max_depth": 2, "n_trees": 5, "l2_leaf": 1.0},
        )
        report = run_training([blobs_matrix] * 3, plan)
        assert report.pooled_metrics().f1_weighted > 0.6
        assert report.selection_table()["param_max_depth"].tolist() == [2, 2, 2]
