import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from knode_online.dynamics import QuadParams, hover_state, rk4_step, state_derivative
from knode_online.ensemble import EnsembleModel
from knode_online.sim import (
    EpisodeLog,
    EpisodeSettings,
    GeoGains,
    MassSchedule,
    ReferenceTrajectory,
    Scenario,
    geometric_control,
    mse,
    offline_pipeline,
    one_step_loss,
    plant_step,
    reference_sample,
    run_episode,
)
from knode_online.trainer import TrainConfig, knode_loss, train_member

HOVER = Scenario(radius=3.0, speed=0.0, schedule=MassSchedule.constant())


# -- reference ---------------------------------------------------------------


def test_reference_starts_at_radius_on_x_axis():
    ref = reference_sample(ReferenceTrajectory(3.0, 1.0), 0.0)
    np.testing.assert_array_equal(ref[0:3], [3.0, 0.0, 0.0])


@pytest.mark.parametrize("radius, speed, alt", [(3.0, 1.0, 0.0), (2.0, 0.8, 1.5), (4.0, 1.2, -0.5)])
def test_quarter_period_reaches_the_y_axis(radius, speed, alt):
    traj = ReferenceTrajectory(radius, speed, alt)
    ref = traj.sample((math.pi / 2) * radius / speed)
    np.testing.assert_allclose(ref[0:3], [0.0, radius, alt], atol=1e-9)


def test_zero_speed_reference_is_constant():
    traj = ReferenceTrajectory(3.0, 0.0, 1.0)
    for t in (0.0, 1.0, 7.5):
        np.testing.assert_array_equal(traj(t)[0:6], [3.0, 0.0, 1.0, 0.0, 0.0, 0.0])


@given(st.floats(0.5, 5.0), st.floats(0.0, 2.0), st.floats(0.0, 20.0))
def test_reference_velocity_is_tangent_with_the_set_speed(radius, speed, t):
    ref = ReferenceTrajectory(radius, speed)(t)
    assert abs(np.linalg.norm(ref[3:6]) - speed) < 1e-12
    assert abs(ref[0:2] @ ref[3:5]) < 1e-9 * max(1.0, radius * speed)
    np.testing.assert_array_equal(ref[6:10], [1.0, 0, 0, 0])


def test_reference_acceleration_is_centripetal():
    traj = ReferenceTrajectory(2.0, 1.0)
    t, h = 1.3, 1e-5
    fd = (traj(t + h)[3:6] - traj(t - h)[3:6]) / (2 * h)
    np.testing.assert_allclose(traj.acceleration(t), fd, atol=1e-8)
    assert abs(np.linalg.norm(traj.acceleration(t)) - 1.0 / 2.0) < 1e-12


@pytest.mark.parametrize("kwargs", [dict(radius=0.0), dict(speed=-1.0)])
def test_invalid_reference(kwargs):
    with pytest.raises(ValueError):
        ReferenceTrajectory(**kwargs)


# -- mass schedule and plant -------------------------------------------------


@pytest.mark.parametrize("t, mult", [(0.0, 1.0), (1.9, 1.0), (1.998, 1.0), (2.0, 0.5), (4.9, 0.5), (5.0, 1.33), (8.0, 1.33)])
def test_mass_schedule_breakpoints(t, mult):
    assert MassSchedule().multiplier(t) == mult


def test_mass_change_lands_on_the_plant_step_grid():
    sched = MassSchedule()
    assert sched.multiplier(1000 * 0.002) == 0.5
    assert sched.multiplier(999 * 0.002) == 1.0


@pytest.mark.parametrize(
    "kwargs", [dict(multipliers=(1.0, 0.5)), dict(multipliers=(1.0, 0.0, 1.0)), dict(breakpoints=(5.0, 2.0))]
)
def test_invalid_schedule(kwargs):
    with pytest.raises(ValueError):
        MassSchedule(**kwargs)


def test_plant_uses_the_scheduled_mass():
    p = QuadParams()
    x = hover_state()
    u = p.hover_input()
    for t, mult in ((1.0, 1.0), (3.0, 0.5), (6.0, 1.33)):
        expected = rk4_step(lambda _, s: state_derivative(s, u, p, mass=mult * p.mass), x, t, 0.002)
        np.testing.assert_allclose(plant_step(x, u, t, 0.002, MassSchedule(), p), expected, rtol=1e-14, atol=1e-16)


# -- geometric controller ----------------------------------------------------


def test_geometric_hover_on_reference():
    p = QuadParams()
    x = hover_state(position=(3, 0, 0))
    u = geometric_control(x, x, GeoGains(), p)
    assert u[0] == pytest.approx(p.mass * 9.81, rel=1e-14)
    np.testing.assert_array_equal(u[1:], 0.0)


def test_geometric_altitude_error_adds_proportional_force():
    p = QuadParams()
    gains = GeoGains()
    x = hover_state()
    ref = hover_state(position=(0, 0, 0.1))
    u = geometric_control(x, ref, gains, p)
    assert u[0] == pytest.approx(p.mass * 9.81 + gains.position[2] * 0.1, rel=1e-12)


def test_geometric_yaw_rate_is_damped():
    p = QuadParams()
    gains = GeoGains()
    x = hover_state()
    x[12] = 0.5
    u = geometric_control(x, hover_state(), gains, p)
    assert u[3] == pytest.approx(-gains.rate[2] * 0.5, rel=1e-12)
    assert u[3] < 0


def test_geometric_output_is_clipped(rng):
    p = QuadParams()
    x = hover_state()
    u = geometric_control(x, hover_state(position=(0, 0, 100.0)), GeoGains(), p)
    assert u[0] == p.thrust_max


def test_gains_must_be_positive():
    with pytest.raises(ValueError):
        GeoGains(position=(0.2, 0.0, 0.2))


# -- mse ---------------------------------------------------------------------


def fake_log(err, dt=0.002):
    n = err.shape[0]
    refs = np.zeros((n, 13))
    refs[:, 6] = 1.0
    states = refs.copy()
    states[:, 0:3] += err
    return EpisodeLog(
        method="mpc-nominal", scenario=Scenario(), seed=0, t=np.arange(n) * dt, states=states, refs=refs,
        controls=np.zeros((n, 4)), iterations=np.zeros(n, int), converged=np.ones(n, bool), versions=np.zeros(n, int),
    )


def test_mse_of_identical_trajectories_is_zero():
    assert mse(fake_log(np.zeros((50, 3)))) == {"overall": 0.0, "x": 0.0, "y": 0.0, "z": 0.0}


def test_mse_of_constant_z_offset():
    err = np.zeros((50, 3))
    err[:, 2] = 0.1
    out = mse(fake_log(err))
    assert out["z"] == pytest.approx(0.01, rel=1e-12)
    assert out["x"] == 0.0 and out["y"] == 0.0
    assert out["overall"] == pytest.approx(0.01 / 3, rel=1e-12)


def test_mse_window_selects_samples():
    err = np.zeros((100, 3))
    err[50:, 0] = 1.0
    lg = fake_log(err)
    assert mse(lg, (0.0, 0.1))["x"] == 0.0
    assert mse(lg, (0.1, 0.2))["x"] == 1.0
    with pytest.raises(ValueError):
        mse(lg, (5.0, 6.0))


@given(st.integers(0, 10_000), st.floats(0.1, 10.0))
@settings(max_examples=30, deadline=None)
def test_mse_is_permutation_invariant_and_quadratic(seed, c):
    rng = np.random.default_rng(seed)
    err = rng.normal(size=(40, 3))
    base = mse(fake_log(err))
    perm = mse(fake_log(err[rng.permutation(40)]))
    scaled = mse(fake_log(c * err))
    for k in base:
        assert perm[k] == pytest.approx(base[k], rel=1e-12)
        assert scaled[k] == pytest.approx(c * c * base[k], rel=1e-12)


# -- episodes ----------------------------------------------------------------


def short_settings(t_N=1.0, **kw):
    return EpisodeSettings(t_N=t_N, offline_window=min(5.0, t_N), **kw)


def test_nominal_mpc_holds_hover():
    lg = run_episode("mpc-nominal", HOVER, short_settings(2.0))
    err = np.linalg.norm(lg.states[:, 0:3] - lg.refs[:, 0:3], axis=1)
    assert err.max() < 0.01
    assert not lg.failed and np.all(lg.versions == 0)


def test_geometric_tracks_a_circle_without_diverging():
    lg = run_episode("geometric", Scenario(3.0, 1.0, schedule=MassSchedule.constant()), EpisodeSettings())
    err = np.linalg.norm(lg.states[:, 0:3] - lg.refs[:, 0:3], axis=1)
    assert not lg.failed and len(lg) == 4000
    assert err.max() < 1.0


def test_log_spacing_and_event_order():
    lg = run_episode("geometric", Scenario(3.0, 1.0), EpisodeSettings())
    np.testing.assert_allclose(np.diff(lg.t), 0.002, atol=1e-12)
    times = [e[0] for e in lg.events]
    assert times == sorted(times)
    assert [e[1] for e in lg.events] == ["mass-change", "mass-change"]


def test_divergence_truncates_the_log():
    # five times the mass against a thrust cap of twice the nominal weight: it falls
    sc = Scenario(3.0, 1.0, schedule=MassSchedule((0.1,), (1.0, 5.0)))
    lg = run_episode("geometric", sc, EpisodeSettings())
    assert lg.failed and len(lg) < 4000
    assert lg.events[-1][1] == "failure"
    assert len(lg.states) == len(lg.t) == len(lg.controls)


def test_unknown_method_and_missing_offline_model():
    with pytest.raises(ValueError):
        run_episode("pid", HOVER, short_settings())
    with pytest.raises(ValueError):
        run_episode("knode-offline", HOVER, short_settings())


def test_episodes_are_deterministic():
    s = short_settings(0.6, t_col=0.1)
    sc = Scenario(3.0, 1.0, schedule=MassSchedule((0.2,), (1.0, 0.5)))
    a = run_episode("knode-online", sc, s, seed=3)
    b = run_episode("knode-online", sc, s, seed=3)
    for name in ("t", "states", "refs", "controls", "iterations", "converged", "versions"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
    assert a.events == b.events


def test_controllers_never_see_the_mass_schedule():
    sc = Scenario(3.0, 1.0, schedule=MassSchedule((0.2,), (1.0, 0.5)))
    lg = run_episode("knode-online", sc, short_settings(0.8, t_col=0.1), seed=0)
    for m in lg.published_models:
        assert m.params == QuadParams()


def _altitude_offset(lg, last=0.5):
    keep = lg.t >= lg.t[-1] - last
    return float(np.mean(lg.states[keep, 2] - lg.refs[keep, 2]))


def test_half_mass_pushes_nominal_mpc_upward_and_a_residual_corrects_it():
    sc = Scenario(3.0, 0.0, schedule=MassSchedule((), (0.5,)))
    s = short_settings(2.0)
    nominal = run_episode("mpc-nominal", sc, s)
    offset_nominal = _altitude_offset(nominal)
    assert offset_nominal > 0
    batch = nominal.to_batch(1.0, 2.0)
    model, _ = train_member(EnsembleModel(s.params, 3, (), 0, s.layer_dims), batch, TrainConfig(epochs=300))
    learned = run_episode("knode-offline", sc, s, offline_model=model)
    assert abs(_altitude_offset(learned)) < abs(offset_nominal)


def test_offline_model_is_frozen_and_beats_the_physics_model():
    sc = Scenario(3.0, 1.0)
    s = EpisodeSettings(t_N=5.0, offline_epochs=300)
    nominal = run_episode("mpc-nominal", sc, s)
    model = offline_pipeline(sc, s, seed=0, nominal_log=nominal)
    assert len(model.members) == 1 and model.version == 1
    held_out = nominal.to_batch(3.0, 4.0)
    assert knode_loss(model, held_out) < knode_loss(EnsembleModel(s.params), held_out)
    flown = run_episode("knode-offline", sc, replace(s, t_N=1.0, offline_window=1.0), offline_model=model)
    assert np.all(flown.versions == model.version)


def test_offline_pipeline_flies_its_own_data_when_no_log_is_given():
    s = short_settings(1.0, offline_epochs=5)
    model = offline_pipeline(HOVER, s, seed=0)
    assert len(model.members) == 1


def test_to_batch_and_with_seed():
    lg = run_episode("geometric", HOVER, short_settings(0.2))
    b = lg.to_batch(0.05, 0.1)
    assert len(b) == 25 and b.dt == 0.002
    other = lg.with_seed(9)
    assert other.seed == 9 and other.states is lg.states and other.events is not lg.events
    assert one_step_loss(EnsembleModel(), lg, (0.0, 0.2)) < 1e-20


@pytest.mark.parametrize(
    "kwargs",
    [dict(t_col=0.151), dict(t_N=8.001), dict(scheduler="magic"), dict(offline_window=9.0), dict(offline_stride=3)],
)
def test_invalid_episode_settings(kwargs):
    with pytest.raises(ValueError):
        EpisodeSettings(**kwargs)
