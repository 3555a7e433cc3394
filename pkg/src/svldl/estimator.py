"""scikit-learn style wrapper around the trainable head.

`SVLDLRegressor` exposes fit/predict/get_params/set_params so the model
composes with pipelines, grid search, and cloning.  X is a length-N sequence
of (L, T, C) feature arrays (T may vary per sample) or a single (N, L, T, C)
array; y holds real-valued ages in [1, k_max].
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.exceptions import NotFittedError

from .data import Sample
from .distributions import make_candidate_set
from .losses import LossWeights
from .model import (
    ModelConfig,
    TrainSettings,
    evaluate_model,
    forward_cached,
    train_model,
)


def _as_feature_list(X) -> list:
    """Validate X into a list of float64 (L, T, C) arrays with a common (L, C)."""
    if isinstance(X, np.ndarray) and X.ndim == 4:
        seqs = [np.asarray(X[i], dtype=np.float64) for i in range(X.shape[0])]
    else:
        seqs = [np.asarray(x, dtype=np.float64) for x in X]
    if len(seqs) == 0:
        raise ValueError("X must contain at least one feature sequence")
    for i, s in enumerate(seqs):
        if s.ndim != 3:
            raise ValueError(f"X[{i}] must be a 3-D (L, T, C) array, got shape {s.shape}")
        if not np.all(np.isfinite(s)):
            raise ValueError(f"X[{i}] contains non-finite values")
        if s.shape[0] != seqs[0].shape[0] or s.shape[2] != seqs[0].shape[2]:
            raise ValueError(
                f"X[{i}] has (L, C) = ({s.shape[0]}, {s.shape[2]}), "
                f"expected ({seqs[0].shape[0]}, {seqs[0].shape[2]})")
    return seqs


class SVLDLRegressor(BaseEstimator, RegressorMixin):
    """Age regressor trained with the selective-variance hybrid loss.

    Parameters mirror the training configuration: loss weights, the variance
    candidate grid (sigma grid squared into variances by default), the head
    sizes, and the SGD settings.  `random_state` seeds initialization,
    shuffling, and cropping; fits are bitwise reproducible.
    """

    def __init__(self, k_max=100, hidden_size=128, learning_rate=2e-3,
                 momentum=0.9, weight_decay=1e-3, batch_size=64, epochs=10,
                 crop_frames=150, lambda_ccc=10.0, lambda_kl=1.0,
                 lambda_variance=0.1, lambda_diff=0.1, lambda_gender=0.01,
                 focal_gamma=10.0, grid_start=0.1, grid_stop=10.0,
                 grid_step=0.1, grid_squared=True, random_state=0):
        self.k_max = k_max
        self.hidden_size = hidden_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.crop_frames = crop_frames
        self.lambda_ccc = lambda_ccc
        self.lambda_kl = lambda_kl
        self.lambda_variance = lambda_variance
        self.lambda_diff = lambda_diff
        self.lambda_gender = lambda_gender
        self.focal_gamma = focal_gamma
        self.grid_start = grid_start
        self.grid_stop = grid_stop
        self.grid_step = grid_step
        self.grid_squared = grid_squared
        self.random_state = random_state

    def _settings(self) -> TrainSettings:
        return TrainSettings(
            weights=LossWeights(ccc=self.lambda_ccc, kl=self.lambda_kl,
                                variance=self.lambda_variance,
                                diff=self.lambda_diff, gender=self.lambda_gender,
                                gamma=self.focal_gamma),
            candidates=make_candidate_set(self.grid_start, self.grid_stop,
                                          self.grid_step, squared=self.grid_squared),
            learning_rate=self.learning_rate, momentum=self.momentum,
            weight_decay=self.weight_decay, batch_size=self.batch_size,
            epochs=self.epochs, crop_frames=self.crop_frames,
            seed=self.random_state)

    def fit(self, X, y, gender=None):
        """Train on feature sequences X and ages y.

        `gender` (0/1 per sample) is required whenever lambda_gender > 0;
        the auxiliary head is part of the training loss but never of
        prediction.
        """
        seqs = _as_feature_list(X)
        ages_arr = np.asarray(y, dtype=np.float64).ravel()
        if ages_arr.shape[0] != len(seqs):
            raise ValueError(f"len(y)={ages_arr.shape[0]} does not match {len(seqs)} sequences")
        if np.any(ages_arr < 1.0) or np.any(ages_arr > self.k_max):
            raise ValueError(f"ages must lie in [1, {self.k_max}]")
        if gender is None:
            if self.lambda_gender > 0.0:
                raise ValueError("lambda_gender > 0 requires the gender argument to fit()")
            genders = np.zeros(len(seqs), dtype=np.int64)
        else:
            genders = np.asarray(gender).astype(np.int64).ravel()
            if genders.shape[0] != len(seqs) or np.any((genders != 0) & (genders != 1)):
                raise ValueError("gender must be a length-N vector of 0/1")
        samples = [Sample(id=str(i), features=s, age=float(a), gender=int(g))
                   for i, (s, a, g) in enumerate(zip(seqs, ages_arr, genders))]
        config = ModelConfig(k_max=self.k_max, num_layers=seqs[0].shape[0],
                             feature_dim=seqs[0].shape[2],
                             hidden_size=self.hidden_size)
        self.params_, self.training_reports_ = train_model(samples, config, self._settings())
        return self

    def _require_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("fit this SVLDLRegressor before predicting")

    def predict_distribution(self, X) -> np.ndarray:
        """(N, k_max) matrix of predicted age distributions."""
        self._require_fitted()
        seqs = _as_feature_list(X)
        out = np.empty((len(seqs), self.params_.config.k_max))
        for i, s in enumerate(seqs):
            out[i] = forward_cached(s, self.params_).age_probs
        return out

    def predict(self, X) -> np.ndarray:
        """Predicted ages: the mean of each predicted distribution."""
        dists = self.predict_distribution(X)
        k = np.arange(1.0, dists.shape[1] + 0.5)
        return dists @ k

    def predict_std(self, X) -> np.ndarray:
        """Per-sample uncertainty: the std of each predicted distribution."""
        dists = self.predict_distribution(X)
        k = np.arange(1.0, dists.shape[1] + 0.5)
        mu = dists @ k
        var = np.sum(dists * (k[None, :] - mu[:, None]) ** 2, axis=1)
        return np.sqrt(np.maximum(var, 0.0))

    def evaluate(self, X, y, q: float = 2.0):
        """EvalReport (MAE, PCC, unimodal coefficient) on the given data."""
        self._require_fitted()
        seqs = _as_feature_list(X)
        ages_arr = np.asarray(y, dtype=np.float64).ravel()
        samples = [Sample(id=str(i), features=s, age=float(a), gender=0)
                   for i, (s, a) in enumerate(zip(seqs, ages_arr))]
        return evaluate_model(self.params_, samples, q=q)
