import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from knode_online.estimator import KnodeRegressor
from knode_online.trainer import knode_loss

from test_trainer import plant_batch


@pytest.fixture(scope="module")
def half_mass_pairs():
    batch = plant_batch(0.5, n=75)
    z, target = batch.pairs()
    return batch, z, target


def test_fit_reduces_one_step_error(half_mass_pairs):
    batch, z, target = half_mass_pairs
    est = KnodeRegressor(epochs=200).fit(z, target)
    assert est.n_features_in_ == 17
    assert len(est.model_.members) == 1
    assert est.loss_reports_[0].final_loss < 0.5 * est.loss_reports_[0].initial_loss
    pred = est.predict(z)
    assert pred.shape == target.shape
    assert knode_loss(est.model_, batch, 0.0) == pytest.approx(np.mean(np.sum((pred - target) ** 2, axis=1)))


def test_partial_fit_adds_members_up_to_capacity(half_mass_pairs):
    _, z, target = half_mass_pairs
    est = KnodeRegressor(epochs=5, capacity=2)
    for _ in range(3):
        est.partial_fit(z, target)
    assert len(est.model_.members) == 2 and est.model_.version == 3
    est.fit(z, target)
    assert est.model_.version == 1


def test_clone_and_params():
    est = KnodeRegressor(epochs=7, learning_rate=5e-4)
    params = est.get_params()
    assert params["epochs"] == 7 and params["learning_rate"] == 5e-4
    twin = clone(est)
    assert twin.get_params() == params and not hasattr(twin, "model_")


def test_fit_is_deterministic(half_mass_pairs):
    _, z, target = half_mass_pairs
    a = KnodeRegressor(epochs=10, output_init_scale=1.0, random_state=3).fit(z, target)
    b = KnodeRegressor(epochs=10, output_init_scale=1.0, random_state=3).fit(z, target)
    assert a.predict(z).tobytes() == b.predict(z).tobytes()


def test_predict_before_fit():
    with pytest.raises(NotFittedError):
        KnodeRegressor().predict(np.zeros((1, 17)))


@pytest.mark.parametrize("n_x, n_y", [(16, 13), (17, 12)])
def test_shape_errors(n_x, n_y):
    with pytest.raises(ValueError):
        KnodeRegressor(epochs=1).fit(np.zeros((5, n_x)), np.zeros((5, n_y)))
