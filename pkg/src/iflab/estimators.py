"""scikit-learn style wrappers around the functional core."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, clone
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import Dataset
from .influence import EstimatorConfig, build_context
from .metrics import orient, relabel_all
from .model import Checkpoint, ModelSpec, init_params, predict_proba
from .numerics import RngState
from .optim import SgdConfig, TuneConfig, minimize_risk, train, tune_on_validation

__all__ = ["SoftmaxClassifier", "InfluenceScorer"]


class SoftmaxClassifier(ClassifierMixin, BaseEstimator):
    """Multinomial logistic regression or a small tanh/relu MLP.

    ``solver="newton"`` runs the full-batch minimizer (convex models only
    in practice); ``"sgd"`` uses minibatch SGD with the given schedule.
    """

    def __init__(self, hidden_sizes=(), activation="tanh", weight_decay=1e-3,
                 solver="sgd", learning_rate=0.1, momentum=0.9, steps=800, batch_size=128,
                 schedule="cosine", random_state=0):
        self.hidden_sizes = hidden_sizes
        self.activation = activation
        self.weight_decay = weight_decay
        self.solver = solver
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.steps = steps
        self.batch_size = batch_size
        self.schedule = schedule
        self.random_state = random_state

    def _spec(self, dim, k):
        kind = "mlp" if len(self.hidden_sizes) else "logistic"
        return ModelSpec(kind, dim, k, tuple(self.hidden_sizes), self.activation,
                         self.weight_decay)

    def _dataset(self, X, y):
        return Dataset(X, np.searchsorted(self.classes_, y), len(self.classes_))

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = np.unique(y)
        if self.classes_.size < 2:
            raise ValueError("need at least two classes")
        self.n_features_in_ = X.shape[1]
        self.spec_ = self._spec(X.shape[1], self.classes_.size)
        data = self._dataset(X, y)
        rng = RngState(int(self.random_state))
        cfg = SgdConfig(self.learning_rate, self.momentum, self.steps, self.batch_size,
                        self.schedule)
        if self.solver == "newton":
            self.params_ = minimize_risk(self.spec_, data, init_params(self.spec_, rng), tol=1e-9)
            self.path_ = None
        elif self.solver == "sgd":
            self.path_ = train(self.spec_, data, cfg, rng)
            self.params_ = self.path_[-1].params
        else:
            raise ValueError(f"unknown solver {self.solver!r}")
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return predict_proba(self.spec_, self.params_, X)

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]


class InfluenceScorer(BaseEstimator):
    """Fit a classifier, optionally tune it on validation data, then score points.

    ``score_samples(X, y)`` returns noisiness: larger means more likely
    mislabeled, whatever the estimator's native sign convention.
    """

    def __init__(self, variant="fvm", damping=1e-3, backend=None, auto_damping=False,
                 classifier=None, tune_steps=1000, tune_learning_rate=0.01, tune_batch_size=128,
                 sam_gamma=0.05, random_state=0):
        self.variant = variant
        self.damping = damping
        self.backend = backend
        self.auto_damping = auto_damping
        self.classifier = classifier
        self.tune_steps = tune_steps
        self.tune_learning_rate = tune_learning_rate
        self.tune_batch_size = tune_batch_size
        self.sam_gamma = sam_gamma
        self.random_state = random_state

    def fit(self, X, y, X_val, y_val):
        X, y = check_X_y(X, y, dtype=np.float64)
        X_val, y_val = check_X_y(X_val, y_val, dtype=np.float64)
        clf = self.classifier if self.classifier is not None else SoftmaxClassifier(
            random_state=self.random_state)
        if not hasattr(clf, "params_"):
            clf = clone(clf).fit(X, y)
        self.classifier_ = clf
        self.classes_ = clf.classes_
        unknown = np.setdiff1d(np.unique(y_val), self.classes_)
        if unknown.size:
            raise ValueError(f"validation labels {unknown.tolist()} not seen in training")
        self.config_ = EstimatorConfig(self.variant, self.damping, hessian_backend=self.backend,
                                       auto_damping=self.auto_damping)
        spec = clf.spec_
        train_set = clf._dataset(X, y)
        val_set = clf._dataset(X_val, y_val)
        star = Checkpoint(clf.params_, 0, clf.learning_rate, "theta_star")
        if self.variant in ("vm", "fvm"):
            tcfg = TuneConfig(self.variant == "fvm",
                              SgdConfig(self.tune_learning_rate, 0.9, self.tune_steps,
                                        self.tune_batch_size, "cosine"),
                              self.sam_gamma)
            cks = [tune_on_validation(spec, star, val_set, tcfg,
                                      RngState(int(self.random_state), 4))]
        elif self.variant == "tracin":
            cks = clf.path_ if clf.path_ else [star]
        else:
            cks = [star]
        self.checkpoints_ = cks
        self.context_ = build_context(self.config_, train_set, val_set, cks, spec)
        self.n_features_in_ = X.shape[1]
        return self

    def _encode(self, X, y):
        check_is_fitted(self, "context_")
        X, y = check_X_y(X, y, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        idx = np.minimum(np.searchsorted(self.classes_, y), self.classes_.size - 1)
        if np.any(self.classes_[idx] != y):
            raise ValueError("y contains labels not seen during fit")
        return X, idx

    def influence(self, X, y):
        """Raw estimator scores in the estimator's own convention."""
        X, y = self._encode(X, y)
        return self.context_.score(X, y)

    def score_samples(self, X, y):
        return orient(self.influence(X, y), self.context_.direction)

    def relabel(self, X):
        check_is_fitted(self, "context_")
        X = check_array(X, dtype=np.float64)
        labels, _ = relabel_all(X, self.classes_.size, self.context_)
        return self.classes_[labels]
