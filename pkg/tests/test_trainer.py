import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from knode_online.data import DataBatch
from knode_online.dynamics import QuadParams, hover_state
from knode_online.ensemble import EnsembleModel
from knode_online.mlp import Mlp, param_count
from knode_online.sim import MassSchedule, plant_step
from knode_online.trainer import (
    TrainConfig,
    TrainingError,
    _Objective,
    fit_new_member,
    knode_loss,
    loss_gradient,
    one_step_predict,
    train_member,
)

from conftest import SMALL_DIMS, filled_model, random_control, random_net, random_state, random_z


def batch_from_model(model, x0, controls, dt):
    states = [x0]
    for u in controls[:-1]:
        states.append(one_step_predict(model, np.concatenate([states[-1], u]), dt))
    t = np.arange(len(controls)) * dt
    return DataBatch(t, np.array(states), np.array(controls), dt)


def plant_batch(mass_multiplier, n=75, dt=0.002, seed=0):
    """Closed-loop-like data from the plant at a fixed mass multiple."""
    rng = np.random.default_rng(seed)
    p = QuadParams()
    sched = MassSchedule((), (mass_multiplier,))
    x = random_state(rng, vel_scale=0.3, rate_scale=0.3)
    xs, us = [], []
    for k in range(n):
        u = random_control(rng, p, spread=0.05)
        xs.append(x)
        us.append(u)
        x = plant_step(x, u, k * dt, dt, sched, p)
    return DataBatch(np.arange(n) * dt, np.array(xs), np.array(us), dt)


# -- one-step prediction -----------------------------------------------------


def test_hover_prediction_is_the_current_state():
    model = EnsembleModel()
    z = np.concatenate([hover_state(), model.params.hover_input()])
    np.testing.assert_array_equal(one_step_predict(model, z, 0.002), hover_state())


def test_free_fall_prediction():
    model = EnsembleModel()
    z = np.concatenate([hover_state(), np.zeros(4)])
    assert abs(one_step_predict(model, z, 0.002)[5] - (-0.01962)) < 1e-9


def test_constant_velocity_residual_shifts_prediction_by_d_dt(rng):
    d = np.zeros(13)
    d[3:6] = [0.3, -0.2, 0.1]
    net = Mlp.initialize(SMALL_DIMS, rng, output_scale=0.0)
    p = net.params.copy()
    p[-13:] = d
    base = EnsembleModel(QuadParams(), 3, (), 0, SMALL_DIMS)
    model = base.push(net.with_params(p))
    z = random_z(rng)
    dt = 1e-3
    diff = one_step_predict(model, z, dt) - one_step_predict(base, z, dt)
    np.testing.assert_allclose(diff[3:6], d[3:6] * dt, rtol=1e-9)
    # position picks up the second-order term d dt^2 / 2
    np.testing.assert_allclose(diff[0:3], d[3:6] * dt**2 / 2, rtol=1e-6)


def test_one_step_predict_rejects_bad_dt(rng):
    with pytest.raises(ValueError):
        one_step_predict(EnsembleModel(), random_z(rng), 0.0)


# -- loss --------------------------------------------------------------------


def test_loss_is_zero_on_self_generated_data(rng):
    model = filled_model(rng, 2, scale=0.1)
    batch = batch_from_model(model, random_state(rng), [random_control(rng) for _ in range(30)], 0.002)
    assert knode_loss(model, batch, 0.0) < 1e-12


def test_constant_offset_gives_squared_norm(rng):
    model = EnsembleModel()
    d = rng.normal(0, 1e-3, 13)
    dt = 0.002
    states = [random_state(rng)]
    controls = [random_control(rng) for _ in range(20)]
    for u in controls[:-1]:
        states.append(one_step_predict(model, np.concatenate([states[-1], u]), dt) + d)
    batch = DataBatch(np.arange(20) * dt, np.array(states), np.array(controls), dt)
    assert knode_loss(model, batch, 0.0) == pytest.approx(d @ d, rel=1e-9)


def test_regularizer_alone():
    dims = (17, 13)
    model = EnsembleModel(QuadParams(), 3, (), 0, dims)
    theta = np.zeros(param_count(dims))
    theta[0], theta[1] = 3.0, 4.0
    model = model.push(Mlp(dims, theta))
    # data generated by the model itself leaves only the regularizer
    batch = batch_from_model(model, hover_state(), [model.params.hover_input()] * 5, 0.002)
    assert knode_loss(model, batch, 1.0) == pytest.approx(25.0, abs=1e-12)


def test_loss_needs_two_samples():
    batch = DataBatch(np.zeros(1), hover_state()[None], np.zeros((1, 4)), 0.002)
    with pytest.raises(ValueError):
        knode_loss(EnsembleModel(), batch)


@given(st.integers(0, 10_000))
@settings(max_examples=20, deadline=None)
def test_loss_ignores_pair_order(seed):
    rng = np.random.default_rng(seed)
    model = filled_model(rng, 2, scale=0.1)
    z = random_z(rng, 12)
    target = np.array([random_state(rng) for _ in range(12)])
    perm = rng.permutation(12)
    a = _Objective(model, z, target, 0.002, 0.0).evaluate_numpy(model.members[-1].params)[0]
    b = _Objective(model, z[perm], target[perm], 0.002, 0.0).evaluate_numpy(model.members[-1].params)[0]
    assert a == pytest.approx(b, rel=1e-13)


# -- gradient ----------------------------------------------------------------


def test_zero_error_means_zero_gradient(rng):
    model = filled_model(rng, 2, scale=0.1)
    batch = batch_from_model(model, random_state(rng), [random_control(rng) for _ in range(10)], 0.002)
    assert np.max(np.abs(loss_gradient(model, batch, 0.0))) < 1e-12


def test_regularizer_gradient_is_two_l2_theta(rng):
    model = filled_model(rng, 2, scale=0.1)
    batch = batch_from_model(model, random_state(rng), [random_control(rng) for _ in range(10)], 0.002)
    theta = model.members[-1].params
    np.testing.assert_allclose(loss_gradient(model, batch, 0.3), 0.6 * theta, rtol=1e-9, atol=1e-12)


def test_empty_queue_has_nothing_to_differentiate(rng):
    batch = plant_batch(1.0, n=5)
    with pytest.raises(ValueError):
        loss_gradient(EnsembleModel(), batch)


def _fd_check(model, batch, l2, rng, n_coords=50, h=1e-6):
    z, target = batch.pairs()
    obj = _Objective(model, z, target, batch.dt, l2)
    theta = model.members[-1].params.copy()
    _, grad = obj(theta)
    idx = rng.choice(theta.size, size=min(n_coords, theta.size), replace=False)
    fd = np.empty(idx.size)
    for j, k in enumerate(idx):
        tp, tm = theta.copy(), theta.copy()
        tp[k] += h
        tm[k] -= h
        fd[j] = (obj(tp)[0] - obj(tm)[0]) / (2 * h)
    return np.linalg.norm(grad[idx] - fd) / np.linalg.norm(fd)


def test_gradient_matches_finite_differences(rng):
    for trial in range(3):
        model = filled_model(rng, 3, (17, 16, 16, 13), scale=1.0)
        batch = plant_batch(0.7, n=20, dt=0.02, seed=trial)
        assert _fd_check(model, batch, 1e-3, rng) < 1e-5


def test_compiled_objective_matches_array_reference(rng):
    model = filled_model(rng, 3, (17, 16, 16, 13), scale=1.0)
    batch = plant_batch(0.5, n=30, dt=0.002)
    z, target = batch.pairs()
    obj = _Objective(model, z, target, batch.dt, 1e-4)
    theta = model.members[-1].params
    loss_k, grad_k = obj(theta)
    loss_n, grad_n = obj.evaluate_numpy(theta)
    assert loss_k == pytest.approx(loss_n, rel=1e-13)
    np.testing.assert_allclose(grad_k, grad_n, rtol=1e-11, atol=1e-14 * np.max(np.abs(grad_n)))


# -- training ----------------------------------------------------------------


def test_training_on_nominal_data_does_not_increase_loss():
    batch = plant_batch(1.0)
    model = EnsembleModel()
    trained, report = train_member(model, batch, TrainConfig(epochs=50))
    assert report.final_loss <= report.initial_loss
    assert knode_loss(trained, batch) <= knode_loss(model, batch) + 1e-18
    assert len(report.per_epoch) == 50


def test_training_on_half_mass_data_halves_the_loss():
    batch = plant_batch(0.5)
    base = EnsembleModel()
    trained, report = train_member(base, batch, TrainConfig())
    assert knode_loss(trained, batch) < 0.5 * knode_loss(base, batch)


def test_second_training_keeps_first_member_bitwise():
    model = EnsembleModel()
    m1, _ = train_member(model, plant_batch(0.5, seed=1), TrainConfig(epochs=20))
    first = m1.members[0].params.tobytes()
    m2, _ = train_member(m1, plant_batch(0.5, seed=2), TrainConfig(epochs=20))
    assert len(m2.members) == 2
    assert m2.members[0].params.tobytes() == first
    assert m2.version == m1.version + 1


def test_version_increments_once_and_input_snapshot_is_untouched(rng):
    model = filled_model(rng, 3, SMALL_DIMS, scale=0.01)
    before = [m.params.tobytes() for m in model.members]
    trained, _ = train_member(model, plant_batch(0.5), TrainConfig(epochs=10))
    assert trained.version == model.version + 1
    assert [m.params.tobytes() for m in model.members] == before
    assert [m.params.tobytes() for m in trained.members[:-1]] == before[1:]


def test_training_is_deterministic():
    batch = plant_batch(0.5)
    cfg = TrainConfig(epochs=30, seed=7, output_init_scale=1.0)
    a, _ = train_member(EnsembleModel(), batch, cfg)
    b, _ = train_member(EnsembleModel(), batch, cfg)
    assert a.members[-1].params.tobytes() == b.members[-1].params.tobytes()


def test_nonfinite_training_aborts(rng):
    batch = plant_batch(1.0, n=10)
    bad = DataBatch(batch.times, batch.states, batch.controls * np.array([1e300, 1, 1, 1]), batch.dt)
    with pytest.raises(TrainingError):
        train_member(EnsembleModel(), bad, TrainConfig(epochs=3, output_init_scale=1.0))


@pytest.mark.parametrize(
    "kwargs", [dict(epochs=0), dict(learning_rate=0.0), dict(l2_coeff=-1.0), dict(beta1=1.0)]
)
def test_invalid_train_config(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


def test_fit_new_member_on_explicit_pairs():
    batch = plant_batch(0.5)
    z, target = batch.pairs()
    a, _ = fit_new_member(EnsembleModel(), z, target, batch.dt, TrainConfig(epochs=10))
    b, _ = train_member(EnsembleModel(), batch, TrainConfig(epochs=10))
    assert a.members[-1].params.tobytes() == b.members[-1].params.tobytes()
