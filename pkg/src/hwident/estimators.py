"""scikit-learn style wrappers around initialize/estimate and the structure search.

Rows of ``X`` are consecutive samples, so ``predict`` simulates the model
from the first row on; shuffling rows makes no sense here.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .estimation import EstimationConfig, Structure, estimate, initialize
from .metrics import nrmse_fit
from .exceptions import SearchExhaustedError
from .search import SEARCH_MAX_ITER, SearchSpace, decide_search_algorithm, run_search, validation_cascade
from .timeseries import TimeSeries
from .validation import ResidualConfig

__all__ = ["HammersteinWienerRegressor", "HWStructureSearch"]


def _series(X, y, input_names, output_name, sample_time):
    cols = {n: X[:, i] for i, n in enumerate(input_names)}
    if y is not None:
        cols[output_name] = y
    return TimeSeries.from_channels(sample_time, cols)


def _names(input_names, n_features):
    if input_names is None:
        return tuple(f"u{i}" for i in range(n_features))
    names = tuple(input_names)
    if len(names) != n_features:
        raise ValueError(f"input_names has {len(names)} entries but X has {n_features} columns")
    return names


class HammersteinWienerRegressor(RegressorMixin, BaseEstimator):
    """MISO Hammerstein-Wiener model of one fixed structure.

    :param family: input/output nonlinearity family
    :param degree: polynomial degree, breakpoint count or unit count
    :param n_b, n_f, n_k: numerator order, denominator order, input delay
    :param method: solver name, or "auto" to pick by parameter count
    """

    def __init__(
        self,
        family="polynomial",
        degree=3,
        n_b=2,
        n_f=2,
        n_k=0,
        output_family=None,
        output_degree=None,
        method="auto",
        max_iter=100,
        sample_time=1e-3,
        input_names=None,
        output_name="y",
    ):
        self.family = family
        self.degree = degree
        self.n_b = n_b
        self.n_f = n_f
        self.n_k = n_k
        self.output_family = output_family
        self.output_degree = output_degree
        self.method = method
        self.max_iter = max_iter
        self.sample_time = sample_time
        self.input_names = input_names
        self.output_name = output_name

    def _structure(self):
        return Structure(
            self.family, self.degree, self.n_b, self.n_f, self.n_k, self.output_family, self.output_degree
        )

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        self.n_features_in_ = X.shape[1]
        names = _names(self.input_names, X.shape[1])
        data = _series(X, y, names, self.output_name, self.sample_time)
        model = initialize(self._structure(), data, self.output_name, names)
        method = self.method
        if method == "auto":
            method = decide_search_algorithm(self._structure(), model.n_p)
        self.result_ = estimate(model, data, EstimationConfig(max_iter=self.max_iter, method=method))
        self.model_ = self.result_.model
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return self.model_.simulate(X)

    def fit_percent(self, X, y):
        """NRMSE fit in percent, 100 (1 - |y - yhat| / |y - mean(y)|)."""
        return nrmse_fit(np.asarray(y, dtype=float), self.predict(X))


class HWStructureSearch(RegressorMixin, BaseEstimator):
    """Grid search over HW structures followed by the validation cascade.

    When validation data is given to ``fit``, the cascade picks the model;
    otherwise the guarded-update best on the estimation data is used.
    """

    def __init__(
        self,
        space=None,
        max_iter=SEARCH_MAX_ITER,
        workers=1,
        residual_config=None,
        residual_policy="require",
        sample_time=1e-3,
        input_names=None,
        output_name="y",
    ):
        self.space = space
        self.max_iter = max_iter
        self.workers = workers
        self.residual_config = residual_config
        self.residual_policy = residual_policy
        self.sample_time = sample_time
        self.input_names = input_names
        self.output_name = output_name

    def fit(self, X, y, X_val=None, y_val=None):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        self.n_features_in_ = X.shape[1]
        names = _names(self.input_names, X.shape[1])
        est = _series(X, y, names, self.output_name, self.sample_time)
        val = None
        if X_val is not None:
            X_val, y_val = check_X_y(X_val, y_val, dtype=np.float64, y_numeric=True)
            val = _series(X_val, y_val, names, self.output_name, self.sample_time)
        space = self.space or SearchSpace(input_names=names)
        if tuple(space.input_names) != names:
            raise ValueError("space.input_names must match input_names")
        board = run_search(
            space, est, est if val is None else val, self.output_name,
            EstimationConfig(max_iter=self.max_iter), workers=self.workers,
        )
        self.leaderboard_ = board
        if val is not None:
            cand, _ = validation_cascade(
                board, val, self.residual_config or ResidualConfig(), residual_policy=self.residual_policy
            )
        else:
            cand = board.best
        if cand is None:
            raise SearchExhaustedError("no candidate could be fitted", [])
        self.best_candidate_ = cand
        self.model_ = cand.model
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        return self.model_.simulate(X)
