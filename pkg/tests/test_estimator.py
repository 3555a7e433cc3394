import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from svldl.data import synth_generate
from svldl.estimator import SVLDLRegressor


def small_task(n=24, seed=0):
    samples = synth_generate(n, k_max=100, num_layers=2, num_frames=6,
                             feature_dim=8, noise_level=0.05, seed=seed)
    X = [s.features for s in samples]
    y = np.array([s.age for s in samples])
    g = np.array([s.gender for s in samples])
    return X, y, g


def fast_estimator(**overrides):
    kwargs = dict(hidden_size=16, epochs=4, batch_size=8, crop_frames=0,
                  grid_start=0.5, grid_stop=4.0, grid_step=0.5, random_state=1)
    kwargs.update(overrides)
    return SVLDLRegressor(**kwargs)


class TestSklearnProtocol:
    def test_get_set_params_round_trip(self):
        est = SVLDLRegressor(epochs=3, lambda_diff=0.25)
        params = est.get_params()
        assert params["epochs"] == 3
        assert params["lambda_diff"] == 0.25
        est.set_params(epochs=7)
        assert est.epochs == 7

    def test_clone(self):
        est = fast_estimator(lambda_gender=0.0)
        cloned = clone(est)
        assert cloned.get_params() == est.get_params()

    def test_not_fitted_error(self):
        X, _, _ = small_task(4)
        with pytest.raises(NotFittedError):
            fast_estimator().predict(X)


class TestFitPredict:
    def test_fit_predict_shapes(self):
        X, y, g = small_task()
        est = fast_estimator().fit(X, y, gender=g)
        pred = est.predict(X)
        assert pred.shape == (len(X),)
        assert np.all((pred >= 1.0) & (pred <= 100.0))

    def test_fit_is_deterministic(self):
        X, y, g = small_task()
        p1 = fast_estimator().fit(X, y, gender=g).predict(X)
        p2 = fast_estimator().fit(X, y, gender=g).predict(X)
        np.testing.assert_array_equal(p1, p2)

    def test_gender_required_when_weighted(self):
        X, y, _ = small_task(8)
        with pytest.raises(ValueError, match="gender"):
            fast_estimator().fit(X, y)

    def test_gender_optional_when_unweighted(self):
        X, y, _ = small_task(8)
        est = fast_estimator(lambda_gender=0.0).fit(X, y)
        assert est.predict(X).shape == (8,)

    def test_four_dim_array_input(self):
        X, y, g = small_task(8)
        stacked = np.stack(X)
        est = fast_estimator().fit(stacked, y, gender=g)
        np.testing.assert_array_equal(est.predict(stacked), est.predict(X))

    def test_age_range_validation(self):
        X, y, g = small_task(8)
        y = y.copy()
        y[0] = 150.0
        with pytest.raises(ValueError, match="ages"):
            fast_estimator().fit(X, y, gender=g)

    def test_learns_signal(self):
        X, y, g = small_task(64, seed=3)
        est = fast_estimator(epochs=60, batch_size=16,
                             learning_rate=5e-3).fit(X, y, gender=g)
        rep = est.evaluate(X, y)
        assert rep.mae < 4.0
        assert rep.pcc > 0.9


class TestDistributionOutputs:
    def test_distribution_rows_sum_to_one(self):
        X, y, g = small_task(8)
        est = fast_estimator().fit(X, y, gender=g)
        dists = est.predict_distribution(X)
        assert dists.shape == (8, 100)
        np.testing.assert_allclose(dists.sum(axis=1), 1.0, atol=1e-12)

    def test_std_nonnegative_and_consistent(self):
        X, y, g = small_task(8)
        est = fast_estimator().fit(X, y, gender=g)
        stds = est.predict_std(X)
        assert np.all(stds >= 0.0)
        dists = est.predict_distribution(X)
        k = np.arange(1.0, 101.0)
        mu = dists @ k
        np.testing.assert_allclose(
            stds, np.sqrt(np.sum(dists * (k[None, :] - mu[:, None]) ** 2, axis=1)),
            rtol=1e-12)
