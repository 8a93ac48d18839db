import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from knode_online.artifacts import (
    EPISODE_COLUMNS,
    ArtifactError,
    dumps_checkpoint,
    fmt,
    load_checkpoint,
    load_episode_columns,
    load_summary,
    loads_checkpoint,
    save_checkpoint,
    save_episode,
    save_summary,
)
from knode_online.dynamics import QuadParams
from knode_online.ensemble import EnsembleModel
from knode_online.sim import EpisodeSettings, MassSchedule, Scenario, run_episode

from conftest import SMALL_DIMS, filled_model, random_z


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_number_format_round_trips_exactly(v):
    assert float(fmt(v)) == v


def test_empty_model_round_trip(tmp_path):
    model = EnsembleModel(QuadParams(mass=0.05), 3, (), 7, SMALL_DIMS)
    save_checkpoint(model, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert back.members == () and back.version == 7 and back.capacity == 3
    assert back.layer_dims == SMALL_DIMS and back.params == model.params


def test_full_queue_round_trip_is_bitwise(rng, tmp_path):
    model = filled_model(rng, 5, SMALL_DIMS, capacity=3, scale=0.3)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    back = load_checkpoint(path)
    assert back.version == model.version and back.ages == model.ages
    for a, b in zip(model.members, back.members):
        assert a.params.tobytes() == b.params.tobytes()
    z = random_z(rng, 200)
    for zi in z:
        x, u = zi[:13], zi[13:]
        assert model.derivative(x, u).tobytes() == back.derivative(x, u).tobytes()
    # saving the loaded model gives the same bytes
    assert dumps_checkpoint(back) == path.read_text()


def test_checkpoint_header_layout(rng):
    lines = dumps_checkpoint(filled_model(rng, 1, SMALL_DIMS)).splitlines()
    assert lines[0] == "# schema: knode-checkpoint v1"
    assert lines[-1] == "end"


def corrupt(text, old, new):
    assert old in text
    return text.replace(old, new, 1)


@pytest.mark.parametrize(
    "edit, message",
    [
        (lambda t: t[: len(t) // 2], "truncated"),
        (lambda t: t.replace("\nend\n", "\n"), "end"),
        (lambda t: corrupt(t, "knode-checkpoint v1", "knode-checkpoint v9"), "version"),
        (lambda t: corrupt(t, "layer_dims 17 8 13", "layer_dims 17 9 13"), "parameters"),
        (lambda t: corrupt(t, "members 2", "members 4"), "capacity"),
        (lambda t: corrupt(t, "member age 1", "member age 0"), "ages"),
        (lambda t: corrupt(t, "mass ", "mass x"), "bad number"),
        (lambda t: "", "empty"),
    ],
)
def test_broken_checkpoints_are_rejected(rng, edit, message):
    text = dumps_checkpoint(filled_model(rng, 2, SMALL_DIMS))
    with pytest.raises(ArtifactError, match=message):
        loads_checkpoint(edit(text))


def test_missing_checkpoint_file(tmp_path):
    with pytest.raises(ArtifactError):
        load_checkpoint(tmp_path / "nope.ckpt")


def test_episode_record_round_trip(tmp_path):
    sc = Scenario(3.0, 1.0, schedule=MassSchedule((0.1,), (1.0, 0.5)))
    lg = run_episode("geometric", sc, EpisodeSettings(t_N=0.2, offline_window=0.2), seed=4)
    path = tmp_path / "ep.txt"
    save_episode(lg, path)
    cols = load_episode_columns(path)
    assert cols["meta"]["method"] == "geometric" and cols["meta"]["seed"] == "4"
    assert cols["meta"]["failed"] == "0"
    assert set(EPISODE_COLUMNS) <= set(cols)
    np.testing.assert_array_equal(cols["t"], lg.t)
    np.testing.assert_array_equal(cols["x2"], lg.states[:, 2])
    np.testing.assert_array_equal(cols["ref0"], lg.refs[:, 0])
    np.testing.assert_array_equal(cols["u0"], lg.controls[:, 0])
    np.testing.assert_array_equal(cols["version"], lg.versions)


def test_episode_with_wrong_header_is_rejected(tmp_path):
    path = tmp_path / "ep.txt"
    path.write_text("# schema: episode-record v1\nt x y\n0 0 0\n")
    with pytest.raises(ArtifactError):
        load_episode_columns(path)


def test_summary_round_trip(tmp_path):
    summary = {"method": "knode-online", "mse": {"overall": 1.25e-5, "z": 0.1}, "seed": 3}
    save_summary(summary, tmp_path / "s.json")
    assert load_summary(tmp_path / "s.json") == summary
    (tmp_path / "bad.json").write_text("# schema: episode-summary v1\n{not json")
    with pytest.raises(ArtifactError):
        load_summary(tmp_path / "bad.json")
