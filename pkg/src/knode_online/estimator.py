"""scikit-learn style wrapper around the residual ensemble.

The controller and orchestrator work with immutable ``EnsembleModel``
snapshots directly. This adapter exposes the same training step as an
estimator on ``(z_i, x_{i+1})`` pairs so it can be cross-validated or
dropped into sklearn tooling. ``partial_fit`` is the online update: it pushes
one new member trained on the given window.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .dynamics import NX, NZ, QuadParams
from .ensemble import EnsembleModel
from .mlp import DEFAULT_LAYER_DIMS
from .trainer import TrainConfig, fit_new_member, one_step_predict


class KnodeRegressor(RegressorMixin, BaseEstimator):
    """Predict the next state from ``z = [x, u]`` with the hybrid model.

    Parameters mirror ``TrainConfig`` and ``EnsembleModel``. ``quad_params``
    defaults to the nominal vehicle. After fitting, ``model_`` holds the
    ensemble snapshot and ``loss_reports_`` one ``LossReport`` per pushed
    member.
    """

    def __init__(
        self,
        dt=0.002,
        capacity=3,
        layer_dims=DEFAULT_LAYER_DIMS,
        epochs=200,
        learning_rate=1e-3,
        l2_coeff=1e-8,
        output_init_scale=0.0,
        random_state=0,
        quad_params=None,
    ):
        self.dt = dt
        self.capacity = capacity
        self.layer_dims = layer_dims
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.l2_coeff = l2_coeff
        self.output_init_scale = output_init_scale
        self.random_state = random_state
        self.quad_params = quad_params

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            learning_rate=self.learning_rate,
            l2_coeff=self.l2_coeff,
            output_init_scale=self.output_init_scale,
            seed=int(self.random_state or 0),
        )

    def _check_pairs(self, X, y):
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True)
        if X.shape[1] != NZ:
            raise ValueError(f"X needs {NZ} columns [x, u], got {X.shape[1]}")
        if y.ndim != 2 or y.shape[1] != NX:
            raise ValueError(f"y needs {NX} columns (next state), got shape {y.shape}")
        return X, y

    def fit(self, X, y):
        """Start from the nominal model and train a single member."""
        self.model_ = None
        self.loss_reports_ = []
        return self.partial_fit(X, y)

    def partial_fit(self, X, y):
        """Push one member trained on ``(X, y)``; the oldest drops out at capacity."""
        X, y = self._check_pairs(X, y)
        if getattr(self, "model_", None) is None:
            params = self.quad_params if self.quad_params is not None else QuadParams()
            self.model_ = EnsembleModel(params, int(self.capacity), (), 0, tuple(self.layer_dims))
            self.loss_reports_ = []
        self.model_, report = fit_new_member(self.model_, X, y, float(self.dt), self._train_config())
        self.loss_reports_.append(report)
        self.n_features_in_ = NZ
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X)
        if X.shape[1] != NZ:
            raise ValueError(f"X needs {NZ} columns [x, u], got {X.shape[1]}")
        return one_step_predict(self.model_, X, float(self.dt))
