"""scikit-learn style wrappers around the CF-tree and the EM fitters."""
from __future__ import annotations

import math
import numbers

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin, DensityMixin, TransformerMixin
from sklearn.utils import check_random_state
from sklearn.utils.validation import check_array, check_is_fitted

from .gmm import (MixtureModel, em_fit_birch_features, em_fit_features, em_fit_points,
                  responsibilities, score_samples)
from .metrics import MetricForm
from .tree import CFTree, TreeConfig

__all__ = ["CFGaussianMixture", "CFTreeSummarizer", "GaussianMixtureEM"]

_COV = {"spherical": "igmm", "diag": "dgmm"}


def _seed(random_state):
    if random_state is None or isinstance(random_state, numbers.Integral):
        return random_state
    return int(check_random_state(random_state).randint(np.iinfo(np.int32).max))


def _kind(covariance_type):
    try:
        return _COV[covariance_type]
    except KeyError:
        raise ValueError(f"covariance_type must be one of {sorted(_COV)}, "
                         f"got {covariance_type!r}") from None


class _TreeParamsMixin:
    def _tree_config(self, form=None) -> TreeConfig:
        return TreeConfig(branching_factor=self.branching_factor, leaf_capacity=self.leaf_capacity,
                          max_leaf_entries=self.max_leaf_entries, distance=self.distance,
                          absorption=self.absorption,
                          form=self.form if form is None else form,
                          initial_threshold=self.threshold, precision=self.precision)


class CFTreeSummarizer(_TreeParamsMixin, TransformerMixin, ClusterMixin, BaseEstimator):
    """Summarize a point set into at most ``max_leaf_entries`` cluster features.

    After fitting, ``subcluster_centers_`` and ``subcluster_weights_`` describe
    the leaf entries. ``transform`` gives euclidean distances to the centers and
    ``predict`` the nearest one.
    """

    def __init__(self, branching_factor=7, leaf_capacity=7, max_leaf_entries=5000, distance="d4",
                 absorption="r", form="betula", threshold=0.0, precision="double"):
        self.branching_factor = branching_factor
        self.leaf_capacity = leaf_capacity
        self.max_leaf_entries = max_leaf_entries
        self.distance = distance
        self.absorption = absorption
        self.form = form
        self.threshold = threshold
        self.precision = precision

    def fit(self, X, y=None, sample_weight=None):
        self.tree_ = CFTree(self._tree_config())
        return self._insert(X, sample_weight, first=True)

    def partial_fit(self, X, y=None, sample_weight=None):
        """Insert more points into the existing tree (or start one)."""
        first = not hasattr(self, "tree_")
        if first:
            self.tree_ = CFTree(self._tree_config())
        return self._insert(X, sample_weight, first=first)

    def _insert(self, X, sample_weight, first):
        X = check_array(X, dtype=np.float64)
        if not first and X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        self.n_features_in_ = X.shape[1]
        self.tree_.insert_many(X, sample_weight)
        W, A, S = self.tree_.leaf_arrays()
        self.subcluster_weights_ = W
        if self.tree_.config.form is MetricForm.BETULA:
            self.subcluster_centers_ = A
            self.subcluster_sq_dev_ = S
        else:
            self.subcluster_centers_ = A / W[:, None]
            self.subcluster_sum_squares_ = S[:, 0]
        self.labels_ = self.predict(X)
        return self

    def transform(self, X):
        check_is_fitted(self, "tree_")
        X = check_array(X, dtype=np.float64)
        C = self.subcluster_centers_
        d2 = (X * X).sum(1)[:, None] - 2.0 * X @ C.T + (C * C).sum(1)[None, :]
        return np.sqrt(np.maximum(d2, 0.0))

    def predict(self, X):
        check_is_fitted(self, "tree_")
        X = check_array(X, dtype=np.float64)
        C = self.subcluster_centers_
        out = np.empty(X.shape[0], dtype=np.int64)
        # exact differences rather than the expanded form, which cancels far from the origin
        for start in range(0, X.shape[0], 4096):
            block = X[start:start + 4096]
            out[start:start + 4096] = np.argmin(((block[:, None, :] - C[None]) ** 2).sum(2), axis=1)
        return out


class _MixtureMixin(DensityMixin):
    def _store(self, model: MixtureModel, X):
        self.model_ = model
        self.weights_ = model.weights
        self.means_ = model.means
        self.variances_ = model.variances[:, 0] if model.kind == "igmm" else model.variances
        self.n_iter_ = model.n_iter
        self.converged_ = model.converged
        self.n_features_in_ = X.shape[1]
        self.log_likelihood_ = math.fsum(score_samples(model, X))
        self.lower_bound_ = self.log_likelihood_ / X.shape[0]
        return self

    def _check(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def predict_proba(self, X):
        X = self._check(X)
        return responsibilities(self.model_, X)

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)

    def fit_predict(self, X, y=None):
        return self.fit(X).predict(X)

    def score_samples(self, X):
        X = self._check(X)
        return score_samples(self.model_, X)

    def score(self, X, y=None):
        """Mean per-point log-likelihood."""
        return float(np.mean(self.score_samples(X)))


class GaussianMixtureEM(_MixtureMixin, BaseEstimator):
    """EM on raw points with a stable or textbook variance update."""

    def __init__(self, n_components=2, covariance_type="spherical", variance_method="stable",
                 max_iter=100, tol=1e-7, random_state=None):
        self.n_components = n_components
        self.covariance_type = covariance_type
        self.variance_method = variance_method
        self.max_iter = max_iter
        self.tol = tol
        self.random_state = random_state

    def fit(self, X, y=None, sample_weight=None):
        X = check_array(X, dtype=np.float64)
        model = em_fit_points(X, self.n_components, kind=_kind(self.covariance_type),
                              backend=self.variance_method, seed=_seed(self.random_state),
                              max_iter=self.max_iter, tol=self.tol, sample_weight=sample_weight)
        return self._store(model, X)


class CFGaussianMixture(_TreeParamsMixin, _MixtureMixin, BaseEstimator):
    """Summarize with a CF-tree, then run EM on the leaf features.

    ``summary="birch"`` only supports the spherical model.
    """

    def __init__(self, n_components=2, covariance_type="spherical", summary="betula",
                 max_iter=100, tol=1e-7, random_state=None, branching_factor=7, leaf_capacity=7,
                 max_leaf_entries=5000, distance="d4", absorption="r", threshold=0.0,
                 precision="double"):
        self.n_components = n_components
        self.covariance_type = covariance_type
        self.summary = summary
        self.max_iter = max_iter
        self.tol = tol
        self.random_state = random_state
        self.branching_factor = branching_factor
        self.leaf_capacity = leaf_capacity
        self.max_leaf_entries = max_leaf_entries
        self.distance = distance
        self.absorption = absorption
        self.threshold = threshold
        self.precision = precision

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        kind = _kind(self.covariance_type)
        form = MetricForm.parse(self.summary)
        if form is MetricForm.BIRCH and kind != "igmm":
            raise ValueError("BIRCH features carry a scalar sum of squares; only "
                             "covariance_type='spherical' is supported")
        self.tree_ = CFTree(self._tree_config(form))
        self.tree_.insert_many(X)
        W, A, S = self.tree_.leaf_arrays()
        k = min(self.n_components, W.shape[0])
        seed = _seed(self.random_state)
        if form is MetricForm.BIRCH:
            model = em_fit_birch_features((W, A, S[:, 0]), k, seed=seed, max_iter=self.max_iter,
                                          tol=self.tol)
        else:
            model = em_fit_features((W, A, S), k, kind=kind, seed=seed, max_iter=self.max_iter,
                                    tol=self.tol)
        return self._store(model, X)
