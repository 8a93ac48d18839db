import math

import numpy as np
import pytest

from knode_online.artifacts import ArtifactError
from knode_online.bench import (
    build_table,
    cell_winners,
    dumps_table,
    improvements,
    loads_table,
    quartiles,
    render_text,
    run_grid,
    write_report,
)
from knode_online.config import loads


def summary(method, r, v, seed, overall, failed=False, post=None):
    return {
        "method": method, "radius_m": r, "speed_m_s": v, "seed": seed, "failed": failed,
        "mse": {"overall": overall, "x": overall, "y": 2 * overall, "z": 0.0},
        "mse_post": None if post is None else {"overall": post, "x": 0.0, "y": 0.0, "z": 0.0},
    }


def two_method_grid(rng):
    out = []
    for r in (2.0, 3.0):
        for v in (0.8, 1.0):
            for seed in range(3):
                out.append(summary("knode-online", r, v, seed, rng.uniform(1, 2), post=1.0))
                out.append(summary("mpc-nominal", r, v, seed, rng.uniform(3, 4), post=2.0))
    return out


def test_quartiles_of_one_value():
    assert quartiles([0.3]) == (0.3, 0.3, 0.3)


def test_median_of_three():
    assert quartiles([0.6, 0.1, 0.2])[1] == 0.2
    assert all(math.isnan(q) for q in quartiles([]))


def test_improvement_recomputed_from_rows(rng):
    table = build_table(two_method_grid(rng))
    ours = np.mean([r["overall_mean"] for r in table["rows"] if r["method"] == "knode-online"])
    base = np.mean([r["overall_mean"] for r in table["rows"] if r["method"] == "mpc-nominal"])
    assert table["improvement"]["mpc-nominal"] == pytest.approx(100 * (base - ours) / base, abs=1e-12)


def test_improvement_needs_the_online_method():
    assert improvements([{"method": "geometric", "overall_mean": 1.0}]) == {}


def test_failed_episodes_are_counted_not_averaged():
    rows = build_table(
        [summary("geometric", 2.0, 1.0, 0, 1.0), summary("geometric", 2.0, 1.0, 1, 99.0, failed=True)]
    )["rows"]
    assert rows[0]["n_seeds"] == 2 and rows[0]["n_failed"] == 1
    assert rows[0]["overall_median"] == 1.0


def test_row_minimum_is_starred(rng):
    table = build_table(two_method_grid(rng))
    assert set(cell_winners(table).values()) == {"knode-online"}
    rows = render_text(table).splitlines()[2:6]
    col = table["methods"].index("knode-online")
    for line in rows:
        cells = line.split()[2:]
        assert line.count("*") == 1 and cells[col].endswith("*")


def test_render_marks_exactly_one_cell_per_row():
    sums = [
        summary("knode-online", 2.0, 1.0, 0, 0.5),
        summary("mpc-nominal", 2.0, 1.0, 0, 0.3),
        summary("geometric", 2.0, 1.0, 0, 0.9),
    ]
    line = render_text(build_table(sums)).splitlines()[2]
    assert line.count("*") == 1
    assert "0.3*" in line


def test_missing_cells_are_reported_as_gaps():
    cfg = loads("grid:\n  radii_m: [2.0, 3.0]\n  speeds_m_s: [1.0]\n  methods: [mpc-nominal, geometric]\n")
    table = build_table([summary("mpc-nominal", 2.0, 1.0, 0, 1.0)], cfg)
    assert len(table["rows"]) == 1
    assert {(g["radius_m"], g["method"]) for g in table["gaps"]} == {
        (2.0, "geometric"), (3.0, "mpc-nominal"), (3.0, "geometric"),
    }
    assert "missing cells: 3" in render_text(table)


def test_table_text_round_trip(rng):
    table = build_table(two_method_grid(rng))
    table["gaps"] = [{"radius_m": 4.0, "speed_m_s": 1.2, "method": "geometric"}]
    back = loads_table(dumps_table(table))
    assert back["improvement"] == table["improvement"]
    assert back["gaps"] == table["gaps"]
    assert len(back["rows"]) == len(table["rows"])
    for a, b in zip(table["rows"], back["rows"]):
        for k, v in b.items():
            assert a[k] == v


def test_table_with_wrong_header_is_rejected():
    with pytest.raises(ArtifactError):
        loads_table("# schema: result-table v2\n")


def test_small_grid_writes_a_report(tmp_path):
    cfg = loads(
        "sim:\n  t_N_s: 0.4\n  mass_breakpoints_s: [0.2]\n  mass_multipliers: [1.0, 0.5]\n"
        "  post_change_start_s: 0.2\n"
        "grid:\n  radii_m: [3.0]\n  speeds_m_s: [1.0]\n  methods: [mpc-nominal, geometric]\n  seeds: [0, 1]\n"
    )
    result = run_grid(cfg, tmp_path, keep_logs=True)
    assert len(result.summaries) == 4
    # seed-free methods are flown once and shared across seeds
    keys = sorted(result.logs)
    assert len(keys) == 4
    g0, g1 = (result.logs[k] for k in keys if k[1] == "geometric")
    assert g0.states is g1.states and g0.seed != g1.seed
    table = write_report(tmp_path, cfg)
    assert len(table["rows"]) == 2 and table["gaps"] == []
    assert (tmp_path / "results.tsv").exists() and (tmp_path / "table.txt").exists()
    assert len(list((tmp_path / "plot").glob("*.txt"))) == 4
    assert loads_table((tmp_path / "results.tsv").read_text())["rows"][0]["n_seeds"] == 2
