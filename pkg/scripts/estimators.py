"""
Estimators

Multinomial logistic regression (L2, bias unpenalized) with its training-set
AIC, a small softmax gradient-boosted-trees classifier, and the weighted
classification metrics used in the reports. Both classifiers follow the
scikit-learn estimator protocol so StratifiedKFold / clone / metrics work on
them unchanged.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp, softmax
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.metrics import (
    accuracy_score,
    confusion_matrix,
    f1_score,
    precision_score,
    recall_score,
)
from sklearn.tree import DecisionTreeRegressor

from scripts.errors import (
    AbsentClassWarning,
    AlignmentError,
    ConfigError,
    NonFiniteLossError,
    NotEnoughClassesError,
    ProbabilityClampWarning,
)

logger = logging.getLogger(__name__)

ESTIMATOR_KINDS = ("logreg", "gbt")
MODEL_FORMAT_VERSION = 1
PROBABILITY_FLOOR = 1e-300
AIC_LAMBDA = 1e-6


def _check_xy(X, y=None) -> tuple[np.ndarray, np.ndarray | None]:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise AlignmentError(f"Expected a 2-D feature matrix, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise AlignmentError("Feature matrix contains non-finite values")
    if y is None:
        return X, None
    y = np.asarray(y)
    if y.shape != (X.shape[0],):
        raise AlignmentError(f"{X.shape[0]} rows but {y.shape} labels")
    return X, y


def _encode(y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    classes, codes = np.unique(y, return_inverse=True)
    if classes.size < 2:
        raise NotEnoughClassesError(
            f"At least 2 classes are required, got {classes.tolist()}"
        )
    return classes, codes


def _one_hot(codes: np.ndarray, n_classes: int) -> np.ndarray:
    Y = np.zeros((codes.size, n_classes))
    Y[np.arange(codes.size), codes] = 1.0
    return Y


class _ProbaClassifier(ClassifierMixin, BaseEstimator):
    classes_: np.ndarray
    n_features_in_: int

    def _check_features(self, X) -> np.ndarray:
        X, _ = _check_xy(X)
        if X.shape[1] != self.n_features_in_:
            raise AlignmentError(
                f"Model expects {self.n_features_in_} features, got {X.shape[1]}"
            )
        return X

    def predict(self, X) -> np.ndarray:
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]


# Logistic regression


class LogisticRegressionClassifier(_ProbaClassifier):
    """Softmax regression minimizing summed cross-entropy + l2_lambda/2 * ||W||^2.

    ``weights_`` has shape (n_features + 1, n_classes); the last row is the
    bias, which is not penalized. Optimized with L-BFGS-B from zero weights.
    """

    def __init__(self, l2_lambda: float = 1.0, max_iter: int = 500, tol: float = 1e-6):
        self.l2_lambda = l2_lambda
        self.max_iter = max_iter
        self.tol = tol

    def _loss_and_grad(self, params: np.ndarray, X: np.ndarray, Y: np.ndarray):
        n_features, n_classes = X.shape[1], Y.shape[1]
        W = params.reshape(n_features + 1, n_classes)
        Z = X @ W[:-1] + W[-1]
        lse = logsumexp(Z, axis=1)
        loss = float(np.sum(lse - np.sum(Z * Y, axis=1)))
        loss += 0.5 * self.l2_lambda * float(np.sum(W[:-1] ** 2))
        R = np.exp(Z - lse[:, None]) - Y
        grad = np.empty_like(W)
        grad[:-1] = X.T @ R + self.l2_lambda * W[:-1]
        grad[-1] = R.sum(axis=0)
        return loss, grad.ravel()

    def fit(self, X, y):
        if self.l2_lambda < 0:
            raise ConfigError(f"l2_lambda must be >= 0, got {self.l2_lambda}")
        X, y = _check_xy(X, y)
        self.classes_, codes = _encode(y)
        self.n_features_in_ = X.shape[1]
        Y = _one_hot(codes, self.classes_.size)

        x0 = np.zeros((X.shape[1] + 1) * self.classes_.size)
        result = minimize(
            self._loss_and_grad,
            x0,
            args=(X, Y),
            jac=True,
            method="L-BFGS-B",
            options={"maxiter": self.max_iter, "gtol": self.tol, "ftol": 0.0},
        )
        if not np.isfinite(result.fun) or not np.all(np.isfinite(result.x)):
            raise NonFiniteLossError(
                f"Logistic regression loss became non-finite (lambda={self.l2_lambda})"
            )
        self.weights_ = result.x.reshape(X.shape[1] + 1, self.classes_.size)
        _, grad = self._loss_and_grad(result.x, X, Y)
        self.loss_ = float(result.fun)
        self.n_iter_ = int(result.nit)
        self.converged_ = bool(np.max(np.abs(grad)) < self.tol)
        if not self.converged_:
            logger.warning(
                f"Logistic regression (lambda={self.l2_lambda:g}) stopped after "
                f"{self.n_iter_} iterations, max|grad|={np.max(np.abs(grad)):.3g}"
            )
        return self

    @classmethod
    def from_weights(cls, weights, classes, l2_lambda: float = 0.0):
        model = cls(l2_lambda=l2_lambda)
        model.weights_ = np.asarray(weights, dtype=np.float64)
        model.classes_ = np.asarray(classes)
        model.n_features_in_ = model.weights_.shape[0] - 1
        model.n_iter_ = 0
        model.converged_ = True
        return model

    @property
    def coef_(self) -> np.ndarray:
        return self.weights_[:-1].T

    @property
    def intercept_(self) -> np.ndarray:
        return self.weights_[-1]

    def decision_function(self, X) -> np.ndarray:
        X = self._check_features(X)
        return X @ self.weights_[:-1] + self.weights_[-1]

    def predict_proba(self, X) -> np.ndarray:
        return softmax(self.decision_function(X), axis=1)

    @property
    def n_params(self) -> int:
        return (self.n_features_in_ + 1) * (self.classes_.size - 1)


def information_criterion(log_likelihood: float, n_params: int) -> float:
    return 2.0 * n_params - 2.0 * log_likelihood


def log_likelihood(model: _ProbaClassifier, X, y) -> float:
    X, y = _check_xy(X, y)
    proba = model.predict_proba(X)
    lookup = {c: i for i, c in enumerate(model.classes_.tolist())}
    if not set(y.tolist()) <= lookup.keys():
        raise AlignmentError("Labels contain classes the model was not fitted on")
    col = np.array([lookup[v] for v in y.tolist()], dtype=np.int64)
    p_true = proba[np.arange(y.size), col]
    clamped = p_true < PROBABILITY_FLOOR
    if np.any(clamped):
        warnings.warn(
            f"{int(clamped.sum())} true-class probabilities clamped at {PROBABILITY_FLOOR:g}",
            ProbabilityClampWarning,
            stacklevel=2,
        )
        p_true = np.maximum(p_true, PROBABILITY_FLOOR)
    return float(np.sum(np.log(p_true)))


def aic(model: LogisticRegressionClassifier, X, y) -> float:
    """Training-set AIC = 2k - 2 lnL with k = (features + 1) * (classes - 1)."""
    return information_criterion(log_likelihood(model, X, y), model.n_params)


def fit_logreg(X, y, l2_lambda: float) -> LogisticRegressionClassifier:
    return LogisticRegressionClassifier(l2_lambda=l2_lambda).fit(X, y)


# Gradient-boosted trees


@dataclass(frozen=True)
class RegressionTree:
    """Array form of a fitted tree; leaves have left == right == -1."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    depth: int

    @classmethod
    def from_sklearn(cls, tree: DecisionTreeRegressor, leaf_values: np.ndarray):
        t = tree.tree_
        return cls(
            feature=t.feature.astype(np.int64),
            threshold=t.threshold.astype(np.float64),
            left=t.children_left.astype(np.int64),
            right=t.children_right.astype(np.int64),
            value=np.asarray(leaf_values, dtype=np.float64),
            depth=int(tree.get_depth()),
        )

    def apply(self, X: np.ndarray) -> np.ndarray:
        # Trees were grown on float32 copies of X; compare the same way.
        X32 = X.astype(np.float32)
        rows = np.arange(X.shape[0])
        node = np.zeros(X.shape[0], dtype=np.int64)
        for _ in range(self.depth):
            internal = self.left[node] >= 0
            go_left = X32[rows, np.maximum(self.feature[node], 0)] <= self.threshold[node]
            node = np.where(
                internal, np.where(go_left, self.left[node], self.right[node]), node
            )
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "depth": self.depth,
        }

    @classmethod
    def from_dict(cls, d: dict):
        return cls(
            feature=np.asarray(d["feature"], dtype=np.int64),
            threshold=np.asarray(d["threshold"], dtype=np.float64),
            left=np.asarray(d["left"], dtype=np.int64),
            right=np.asarray(d["right"], dtype=np.int64),
            value=np.asarray(d["value"], dtype=np.float64),
            depth=int(d["depth"]),
        )


def _softmax_loss(F: np.ndarray, Y: np.ndarray) -> float:
    return float(np.sum(logsumexp(F, axis=1) - np.sum(F * Y, axis=1)))


class GradientBoostedTreesClassifier(_ProbaClassifier):
    """Softmax boosting with one depth-limited regression tree per class per round.

    Leaf values are Newton steps -sum(g) / (sum(h) + l2_leaf), scaled by
    (K - 1) / K and the learning rate. A round whose step would raise the
    training loss is halved until it does not, so ``train_loss_`` never
    increases.
    """

    MAX_BACKTRACKS = 30

    def __init__(
        self,
        max_depth: int = 3,
        n_trees: int = 100,
        learning_rate: float = 0.1,
        l2_leaf: float = 3.0,
    ):
        self.max_depth = max_depth
        self.n_trees = n_trees
        self.learning_rate = learning_rate
        self.l2_leaf = l2_leaf

    def _check_params(self):
        if self.n_trees < 1:
            raise ConfigError(f"n_trees must be >= 1, got {self.n_trees}")
        if self.max_depth < 1:
            raise ConfigError(f"max_depth must be >= 1, got {self.max_depth}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.l2_leaf < 0:
            raise ConfigError(f"l2_leaf must be >= 0, got {self.l2_leaf}")

    def fit(self, X, y):
        self._check_params()
        X, y = _check_xy(X, y)
        self.classes_, codes = _encode(y)
        self.n_features_in_ = X.shape[1]
        K = self.classes_.size
        Y = _one_hot(codes, K)

        priors = Y.mean(axis=0)
        self.init_scores_ = np.log(priors)
        F = np.tile(self.init_scores_, (X.shape[0], 1))
        loss = _softmax_loss(F, Y)
        self.train_loss_ = [loss]
        self.trees_ = []
        importance = np.zeros(X.shape[1])
        shrink = (K - 1) / K * self.learning_rate

        for _ in range(self.n_trees):
            P = softmax(F, axis=1)
            G = P - Y
            H = np.maximum(P * (1.0 - P), 1e-16)
            round_trees, U = [], np.zeros_like(F)
            for k in range(K):
                reg = DecisionTreeRegressor(max_depth=self.max_depth, random_state=0)
                reg.fit(X, -G[:, k])
                leaf = reg.apply(X)
                n_nodes = reg.tree_.node_count
                g_sum = np.bincount(leaf, weights=G[:, k], minlength=n_nodes)
                h_sum = np.bincount(leaf, weights=H[:, k], minlength=n_nodes)
                values = np.where(
                    reg.tree_.children_left < 0, -g_sum / (h_sum + self.l2_leaf), 0.0
                ) * shrink
                U[:, k] = values[leaf]
                importance += reg.tree_.compute_feature_importances(normalize=False)
                round_trees.append((reg, values))

            step = 1.0
            new_loss = _softmax_loss(F + U, Y)
            for _ in range(self.MAX_BACKTRACKS):
                if new_loss <= loss:
                    break
                step *= 0.5
                new_loss = _softmax_loss(F + step * U, Y)
            else:
                step, new_loss = 0.0, loss

            F = F + step * U
            loss = new_loss
            self.train_loss_.append(loss)
            self.trees_.extend(
                RegressionTree.from_sklearn(reg, values * step) for reg, values in round_trees
            )

        if not np.isfinite(loss):
            raise NonFiniteLossError("Boosting loss became non-finite")
        total = importance.sum()
        self.feature_importances_ = importance / total if total > 0 else importance
        return self

    def decision_function(self, X) -> np.ndarray:
        X = self._check_features(X)
        K = self.classes_.size
        F = np.tile(self.init_scores_, (X.shape[0], 1))
        for i, tree in enumerate(self.trees_):
            F[:, i % K] += tree.predict(X)
        return F

    def predict_proba(self, X) -> np.ndarray:
        return softmax(self.decision_function(X), axis=1)


def fit_gbt(
    X, y, max_depth: int = 3, n_trees: int = 100, learning_rate: float = 0.1, l2_leaf: float = 3.0
) -> GradientBoostedTreesClassifier:
    return GradientBoostedTreesClassifier(
        max_depth=max_depth, n_trees=n_trees, learning_rate=learning_rate, l2_leaf=l2_leaf
    ).fit(X, y)


def make_estimator(kind: str, **params) -> _ProbaClassifier:
    if kind == "logreg":
        return LogisticRegressionClassifier(**params)
    if kind == "gbt":
        return GradientBoostedTreesClassifier(**params)
    raise ConfigError(f"Unknown estimator kind {kind!r}; expected one of {ESTIMATOR_KINDS}")


def estimator_kind(model) -> str:
    if isinstance(model, LogisticRegressionClassifier):
        return "logreg"
    if isinstance(model, GradientBoostedTreesClassifier):
        return "gbt"
    raise ConfigError(f"Unsupported model type {type(model).__name__}")


def feature_importance(model) -> np.ndarray:
    """Mean |weight| across classes for logreg, total split gain for GBT."""
    if estimator_kind(model) == "logreg":
        return np.mean(np.abs(model.weights_[:-1]), axis=1)
    return np.asarray(model.feature_importances_)


def full_proba(model, X, n_classes: int) -> np.ndarray:
    """predict_proba spread over class columns 0..n_classes-1."""
    proba = model.predict_proba(X)
    out = np.zeros((proba.shape[0], n_classes))
    out[:, model.classes_.astype(np.int64)] = proba
    return out


# Serialization


def model_to_dict(model) -> dict:
    kind = estimator_kind(model)
    d = {
        "format_version": MODEL_FORMAT_VERSION,
        "kind": kind,
        "params": model.get_params(),
        "classes": model.classes_.tolist(),
        "n_features": int(model.n_features_in_),
    }
    if kind == "logreg":
        d["weights"] = model.weights_.tolist()
        d["converged"] = bool(model.converged_)
    else:
        d["init_scores"] = model.init_scores_.tolist()
        d["trees"] = [t.to_dict() for t in model.trees_]
        d["feature_importances"] = model.feature_importances_.tolist()
        d["train_loss"] = list(model.train_loss_)
    return d


def model_from_dict(d: dict):
    if d.get("format_version") != MODEL_FORMAT_VERSION:
        raise ConfigError(f"Unsupported model format version {d.get('format_version')!r}")
    model = make_estimator(d["kind"], **d["params"])
    model.classes_ = np.asarray(d["classes"])
    model.n_features_in_ = int(d["n_features"])
    if d["kind"] == "logreg":
        model.weights_ = np.asarray(d["weights"], dtype=np.float64)
        model.converged_ = d["converged"]
    else:
        model.init_scores_ = np.asarray(d["init_scores"], dtype=np.float64)
        model.trees_ = [RegressionTree.from_dict(t) for t in d["trees"]]
        model.feature_importances_ = np.asarray(d["feature_importances"])
        model.train_loss_ = list(d["train_loss"])
    return model


def dump_model(model, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(model_to_dict(model), sort_keys=True, indent=2))
    tmp.replace(path)
    return path


def load_model(path):
    return model_from_dict(json.loads(Path(path).read_text()))


# Metrics


@dataclass(frozen=True)
class MetricsReport:
    f1_weighted: float
    precision_weighted: float
    recall_weighted: float
    accuracy: float
    mae: float
    confusion: np.ndarray
    support: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "f1_weighted": self.f1_weighted,
            "precision_weighted": self.precision_weighted,
            "recall_weighted": self.recall_weighted,
            "accuracy": self.accuracy,
            "mae": self.mae,
            "confusion": self.confusion.tolist(),
            "support": self.support.tolist(),
        }


def compute_metrics(proba, labels) -> MetricsReport:
    proba = np.asarray(proba, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if proba.ndim != 2 or proba.shape[0] != labels.size:
        raise AlignmentError(f"proba {proba.shape} does not match {labels.size} labels")
    if not np.allclose(proba.sum(axis=1), 1.0, atol=1e-6):
        raise AlignmentError("Probability rows must sum to 1")
    n_classes = proba.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise AlignmentError(f"Labels outside 0..{n_classes - 1}")

    class_ids = list(range(n_classes))
    support = np.bincount(labels, minlength=n_classes)
    absent = [c for c in class_ids if support[c] == 0]
    if absent:
        warnings.warn(
            f"Classes {absent} have no support; their per-class scores are 0",
            AbsentClassWarning,
            stacklevel=2,
        )
    pred = np.argmax(proba, axis=1)
    scores = {
        name: float(fn(labels, pred, labels=class_ids, average="weighted", zero_division=0))
        for name, fn in (
            ("f1_weighted", f1_score),
            ("precision_weighted", precision_score),
            ("recall_weighted", recall_score),
        )
    }
    return MetricsReport(
        accuracy=float(accuracy_score(labels, pred)),
        mae=float(np.mean(np.abs(proba - _one_hot(labels, n_classes)))),
        confusion=confusion_matrix(labels, pred, labels=class_ids),
        support=support,
        **scores,
    )
