"""scikit-learn front end: the whole search pipeline as one classifier."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array, check_X_y

from .data import Dataset
from .autodiff import forward
from .search import SearchConfig, run_search
from .spaces import SpaceConfig, build_space


class GateSearchClassifier(BaseEstimator, ClassifierMixin):
    """Searches a pruned architecture on (X, y), then predicts with it.

    fit() runs gate learning on a supernetwork built for the input shape,
    exports the architecture, and retrains it from scratch. X is the usual
    2-d array; pass `image_shape=(C, H, W)` to reshape rows into images and
    search a cell space instead of a dense chain.
    """

    def __init__(self, space="mlp", hidden=(16, 16), image_shape=None,
                 feature_gates=False, cells=2, blocks=2, base_width=8,
                 operators=("conv1x1", "sep3"), aggregator="concat",
                 lam=1e-5, tau=0.001, nu_init=2.5, metric="params",
                 al_epochs=10, retrain_epochs=10, batch_size=32, lr=0.02,
                 eval_fraction=0.2, seed=0):
        self.space = space
        self.hidden = hidden
        self.image_shape = image_shape
        self.feature_gates = feature_gates
        self.cells = cells
        self.blocks = blocks
        self.base_width = base_width
        self.operators = operators
        self.aggregator = aggregator
        self.lam = lam
        self.tau = tau
        self.nu_init = nu_init
        self.metric = metric
        self.al_epochs = al_epochs
        self.retrain_epochs = retrain_epochs
        self.batch_size = batch_size
        self.lr = lr
        self.eval_fraction = eval_fraction
        self.seed = seed

    def _space_config(self, n_features: int, n_classes: int) -> SpaceConfig:
        if self.image_shape is not None:
            shape = tuple(self.image_shape)
            if int(np.prod(shape)) != n_features:
                raise ValueError(
                    f"image_shape {shape} does not match {n_features} features")
            return SpaceConfig(kind=self.space if self.space != "mlp"
                               else "oneshot_cell",
                               classes=n_classes, input_shape=shape,
                               cells=self.cells, blocks=self.blocks,
                               base_width=self.base_width,
                               operators=tuple(self.operators),
                               aggregator=self.aggregator)
        return SpaceConfig(kind="mlp", classes=n_classes,
                           input_shape=(n_features,),
                           hidden=tuple(self.hidden),
                           feature_gates=self.feature_gates)

    def _reshape(self, X: np.ndarray) -> np.ndarray:
        if self.image_shape is not None:
            return X.reshape(len(X), *self.image_shape)
        return X

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least 2 classes")
        self.n_features_in_ = X.shape[1]
        rng = np.random.default_rng(self.seed)
        order = rng.permutation(len(X))
        cut = int(round((1.0 - self.eval_fraction) * len(X)))
        tr, ev = order[:cut], order[cut:]
        if len(ev) == 0:
            tr = ev = order
        data = Dataset(self._reshape(X[tr]).astype(np.float64), y_idx[tr],
                       self._reshape(X[ev]).astype(np.float64), y_idx[ev],
                       len(self.classes_))
        space = build_space(self._space_config(X.shape[1], len(self.classes_)))
        cfg = SearchConfig(lam=self.lam, tau=self.tau, nu_init=self.nu_init,
                           metric=self.metric, al_epochs=self.al_epochs,
                           retrain_epochs=self.retrain_epochs,
                           batch_size=self.batch_size, lr=self.lr,
                           seed=self.seed)
        outcome = run_search(space, data, cfg)
        self.architecture_ = outcome.architecture
        self.cost_ = outcome.cost
        self.history_ = outcome.al_history.records
        self.model_ = outcome.model
        self.holdout_accuracy_ = outcome.accuracy
        return self

    def _logits(self, X) -> np.ndarray:
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit before predict")
        X = check_array(X)
        xb = self._reshape(X).astype(np.float64)
        res = forward(self.model_, xb, mode="eval", retain=False)
        return res.activations[self.model_.output_id]

    def predict(self, X):
        return self.classes_[self._logits(X).argmax(axis=1)]

    def predict_proba(self, X):
        z = self._logits(X)
        z = z - z.max(axis=1, keepdims=True)
        ez = np.exp(z)
        return ez / ez.sum(axis=1, keepdims=True)
