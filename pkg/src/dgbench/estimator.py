"""Scikit-learn style classifier trained with any domain generalization objective."""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .envdata import FeatureSchema
from .exceptions import ConfigurationError
from .models import (ModelInputs, ModelSpec, OptimizerConfig, TensorSet, build_model,
                     predict_proba, train_model)
from .objectives import make_objective


class DGClassifier(ClassifierMixin, BaseEstimator):
    """Binary MLP classifier on tabular features grouped into environments.

    Parameters
    ----------
    algorithm : str
        One of ERM, GroupDRO, IRM, VREx, RVP, IGA, CORAL, MLDG.
    hidden_sizes : tuple of int
        MLP featurizer widths; ``()`` gives a linear model.
    steps : int
        Optimizer steps; each step draws one batch per environment.
    penalty_weight, anneal_steps, groupdro_eta, mldg_alpha :
        Objective hyperparameters (ignored by objectives that lack them).
    standardize : bool
        Scale features with training mean and standard deviation.

    Examples
    --------
    >>> clf = DGClassifier(algorithm="VREx", steps=50).fit(X, y, environments=env)
    >>> clf.predict_proba(X_new)[:, 1]
    """

    def __init__(self, algorithm="ERM", hidden_sizes=(64,), steps=500, lr=1e-3,
                 batch_size=128, weight_decay=0.0, penalty_weight=1.0, anneal_steps=0,
                 groupdro_eta=1e-2, mldg_alpha=1e-2, standardize=True, random_state=0):
        self.algorithm = algorithm
        self.hidden_sizes = hidden_sizes
        self.steps = steps
        self.lr = lr
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.penalty_weight = penalty_weight
        self.anneal_steps = anneal_steps
        self.groupdro_eta = groupdro_eta
        self.mldg_alpha = mldg_alpha
        self.standardize = standardize
        self.random_state = random_state

    def _inputs(self, X) -> ModelInputs:
        n = X.shape[0]
        X = (X - self.mean_) / self.scale_
        return ModelInputs(torch.zeros(n, 0, 0), torch.zeros(n, 0, 0, dtype=torch.int64),
                           torch.as_tensor(X, dtype=torch.float32),
                           torch.zeros(n, 0, dtype=torch.int64))

    def fit(self, X, y, environments=None):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = unique_labels(y)
        if len(self.classes_) != 2:
            raise ConfigurationError(f"binary labels required, got classes {self.classes_}")
        y01 = (y == self.classes_[1]).astype(np.float32)
        envs = np.zeros(len(y), dtype=int) if environments is None else np.asarray(environments)
        if envs.shape != (len(y),):
            raise ConfigurationError("environments must give one label per row")
        self.environments_ = np.unique(envs)
        self.n_features_in_ = X.shape[1]
        if self.standardize:
            self.mean_ = X.mean(axis=0)
            std = X.std(axis=0)
            self.scale_ = np.where(std > 0, std, 1.0)
        else:
            self.mean_, self.scale_ = np.zeros(X.shape[1]), np.ones(X.shape[1])
        schema = FeatureSchema(static_continuous=tuple(f"x{i}" for i in range(X.shape[1])))
        sets = []
        for e in self.environments_:
            m = envs == e
            sets.append(TensorSet(str(e), self._inputs(X[m]),
                                  torch.as_tensor(y01[m])[:, None],
                                  torch.zeros(int(m.sum()), dtype=torch.int8)))
        hparams = {"lambda": self.penalty_weight, "anneal_steps": self.anneal_steps,
                   "groupdro_eta": self.groupdro_eta, "mldg_alpha": self.mldg_alpha}
        objective = make_objective(self.algorithm, len(sets), hparams)
        model = build_model(ModelSpec(hidden_sizes=tuple(self.hidden_sizes)), schema,
                            seed=int(self.random_state))
        self.model_, self.trace_ = train_model(
            model, sets, objective,
            OptimizerConfig(self.lr, self.weight_decay, self.batch_size),
            int(self.steps), seed=int(self.random_state), log_every=0)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        p1 = predict_proba(self.model_, self._inputs(X))
        return np.column_stack([1.0 - p1, p1])

    def decision_function(self, X):
        p = self.predict_proba(X)[:, 1]
        return np.log(p) - np.log1p(-p)

    def predict(self, X):
        p1 = self.predict_proba(X)[:, 1]
        return self.classes_[(p1 >= 0.5).astype(int)]
