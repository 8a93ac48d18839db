"""Run the scenario grid and turn its episode summaries into tables.

``run_grid`` flies every (scenario, method, seed) combination of a config and
writes one record file per episode plus a summary. ``build_table`` and
``write_report`` turn the summaries into a radius-by-speed matrix (cell =
median overall MSE across seeds, lowest per row marked) together with the
improvement percentages of the online method against each baseline.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import artifacts
from .config import ExperimentConfig
from .dynamics import NumericalError
from .sim import METHODS, EpisodeLog, mse, offline_pipeline, one_step_loss, run_episode
from .trainer import TrainingError

log = logging.getLogger(__name__)

TABLE_KIND = "result-table"
TABLE_VERSION = 1
OURS = "knode-online"
# controllers with no learning and no noise give identical runs for every seed
SEED_INVARIANT = ("mpc-nominal", "geometric")
TABLE_COLUMNS = (
    "radius_m", "speed_m_s", "method", "n_seeds", "n_failed",
    "overall_median", "overall_q25", "overall_q75", "overall_mean",
    "x_median", "y_median", "z_median",
    "post_overall_median", "post_overall_mean",
)


def episode_summary(log_: EpisodeLog, post_window) -> dict:
    """Metrics and events of one episode, as stored in the run summary."""
    full = mse(log_)
    post = mse(log_, post_window) if log_.t[-1] >= post_window[0] else None
    return {
        "method": log_.method,
        "radius_m": log_.scenario.radius,
        "speed_m_s": log_.scenario.speed,
        "seed": log_.seed,
        "failed": log_.failed,
        "fingerprint": log_.fingerprint,
        "mse": full,
        "mse_post": post,
        "final_version": int(log_.versions[-1]),
        "events": [[float(t), kind, info] for t, kind, info in log_.events],
    }


@dataclass
class GridResult:
    """In-memory outcome of ``run_grid``: episode summaries and, if kept, the logs."""

    summaries: list = field(default_factory=list)
    logs: dict = field(default_factory=dict)
    offline_models: dict = field(default_factory=dict)


def run_grid(
    cfg: ExperimentConfig,
    out_dir=None,
    keep_logs: bool = False,
    checkpoint_publishes: bool = False,
) -> GridResult:
    """Fly the whole configured grid.

    Nominal-MPC and geometric episodes do not depend on the seed, so each is
    flown once per scenario and reused. The offline model for each seed is
    trained on the nominal flight's first ``offline_window_s`` seconds.
    Episode failures are recorded and the grid carries on.
    """
    settings = cfg.episode_settings()
    post_window = cfg.post_change_window()
    fingerprint = cfg.fingerprint()
    out = Path(out_dir) if out_dir is not None else None
    result = GridResult()
    methods = list(cfg.grid.methods)
    for scenario in cfg.scenarios():
        cache: dict = {}
        need_nominal = "mpc-nominal" in methods or "knode-offline" in methods
        if need_nominal:
            cache["mpc-nominal"] = run_episode("mpc-nominal", scenario, settings, 0, fingerprint=fingerprint)
        for seed in cfg.grid.seeds:
            for method in methods:
                lg = _episode(method, scenario, settings, seed, fingerprint, cache, result)
                summary = episode_summary(lg, post_window)
                result.summaries.append(summary)
                if keep_logs:
                    result.logs[(scenario.label, method, seed)] = lg
                if out is not None:
                    artifacts.save_episode(lg, out / "episodes" / (artifacts.episode_name(lg) + ".txt"))
                    if lg.final_model is not None and lg.final_model.members:
                        artifacts.save_checkpoint(
                            lg.final_model, out / "checkpoints" / (artifacts.episode_name(lg) + ".ckpt")
                        )
                    if checkpoint_publishes:
                        _save_publish_checkpoints(lg, out)
                log.info(
                    "%s %-13s seed %d: overall MSE %.4g%s", scenario.label, method, seed,
                    summary["mse"]["overall"], " (FAILED)" if lg.failed else "",
                )
    if out is not None:
        artifacts.save_summary(
            {"fingerprint": fingerprint, "episodes": result.summaries}, out / "summary.txt"
        )
    return result


def _episode(method, scenario, settings, seed, fingerprint, cache, result):
    if method in SEED_INVARIANT:
        if method not in cache:
            cache[method] = run_episode(method, scenario, settings, 0, fingerprint=fingerprint)
        return cache[method].with_seed(seed)
    if method == "knode-offline":
        try:
            model = offline_pipeline(scenario, settings, seed, nominal_log=cache["mpc-nominal"])
        except (NumericalError, TrainingError) as exc:
            lg = cache["mpc-nominal"].with_seed(seed)
            lg.method, lg.failed = method, True
            lg.events.append((0.0, "failure", {"reason": f"offline training failed: {exc}"}))
            return lg
        result.offline_models[(scenario.label, seed)] = model
        return run_episode(method, scenario, settings, seed, offline_model=model, fingerprint=fingerprint)
    return run_episode(method, scenario, settings, seed, fingerprint=fingerprint)


def _save_publish_checkpoints(lg, out: Path):
    name = artifacts.episode_name(lg)
    for model in lg.published_models:
        artifacts.save_checkpoint(model, out / "checkpoints" / name / f"v{model.version:04d}.ckpt")


# -- aggregation -------------------------------------------------------------


def quartiles(values) -> tuple[float, float, float]:
    """25th percentile, median, 75th percentile (linear interpolation)."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return (math.nan, math.nan, math.nan)
    q25, q50, q75 = np.percentile(v, [25, 50, 75])
    return float(q25), float(q50), float(q75)


def build_table(summaries, cfg: ExperimentConfig | None = None) -> dict:
    """Aggregate episode summaries into table rows and improvement percentages.

    A grid cell missing from ``summaries`` is listed under ``"gaps"``.
    """
    groups: dict = {}
    for s in summaries:
        key = (float(s["radius_m"]), float(s["speed_m_s"]), s["method"])
        groups.setdefault(key, []).append(s)

    if cfg is not None:
        radii = [float(r) for r in cfg.grid.radii_m]
        speeds = [float(v) for v in cfg.grid.speeds_m_s]
        methods = list(cfg.grid.methods)
    else:
        radii = sorted({k[0] for k in groups})
        speeds = sorted({k[1] for k in groups})
        methods = [m for m in METHODS if any(k[2] == m for k in groups)]

    rows = []
    gaps = []
    for r in radii:
        for v in speeds:
            for m in methods:
                group = groups.get((r, v, m))
                if not group:
                    gaps.append({"radius_m": r, "speed_m_s": v, "method": m})
                    continue
                ok = [s for s in group if not s["failed"]]
                overall = [s["mse"]["overall"] for s in ok]
                q25, med, q75 = quartiles(overall)
                post = [s["mse_post"]["overall"] for s in ok if s["mse_post"] is not None]
                rows.append({
                    "radius_m": r, "speed_m_s": v, "method": m,
                    "n_seeds": len(group), "n_failed": len(group) - len(ok),
                    "overall_median": med, "overall_q25": q25, "overall_q75": q75,
                    "overall_mean": float(np.mean(overall)) if overall else math.nan,
                    "x_median": quartiles([s["mse"]["x"] for s in ok])[1],
                    "y_median": quartiles([s["mse"]["y"] for s in ok])[1],
                    "z_median": quartiles([s["mse"]["z"] for s in ok])[1],
                    "post_overall_median": quartiles(post)[1],
                    "post_overall_mean": float(np.mean(post)) if post else math.nan,
                })
    return {"rows": rows, "gaps": gaps, "improvement": improvements(rows), "methods": methods}


def improvements(rows, key: str = "overall_mean") -> dict:
    """Percent by which the online method's grid-average MSE undercuts each baseline."""
    means: dict = {}
    for row in rows:
        means.setdefault(row["method"], []).append(row[key])
    if OURS not in means:
        return {}
    ours = float(np.mean(means[OURS]))
    out = {}
    for m, vals in means.items():
        if m == OURS:
            continue
        base = float(np.mean(vals))
        out[m] = 100.0 * (base - ours) / base if base > 0 else math.nan
    return out


def cell_winners(table: dict, key: str = "overall_median") -> dict:
    """Method with the lowest ``key`` in each (radius, speed) cell."""
    best: dict = {}
    for row in table["rows"]:
        cell = (row["radius_m"], row["speed_m_s"])
        val = row[key]
        if math.isnan(val):
            continue
        if cell not in best or val < best[cell][1]:
            best[cell] = (row["method"], val)
    return {cell: m for cell, (m, _) in best.items()}


# -- rendering ---------------------------------------------------------------


def dumps_table(table: dict) -> str:
    """Machine-readable table: tab-separated rows, then improvement rows."""
    lines = [artifacts.schema_line(TABLE_KIND, TABLE_VERSION), "\t".join(TABLE_COLUMNS)]
    for row in table["rows"]:
        vals = []
        for c in TABLE_COLUMNS:
            v = row[c]
            vals.append(v if isinstance(v, str) else (str(v) if isinstance(v, int) else artifacts.fmt(v)))
        lines.append("\t".join(vals))
    lines.append("")
    lines.append("baseline\timprovement_percent")
    for m, pct in table["improvement"].items():
        lines.append(f"{m}\t{artifacts.fmt(pct)}")
    for gap in table["gaps"]:
        lines.append(f"# gap\t{gap['radius_m']:g}\t{gap['speed_m_s']:g}\t{gap['method']}")
    return "\n".join(lines) + "\n"


def loads_table(text: str) -> dict:
    lines = text.splitlines()
    if not lines:
        raise artifacts.ArtifactError("empty table")
    artifacts.check_schema(lines[0], TABLE_KIND, TABLE_VERSION)
    if lines[1].split("\t") != list(TABLE_COLUMNS):
        raise artifacts.ArtifactError("unexpected table columns")
    rows = []
    i = 2
    while i < len(lines) and lines[i]:
        parts = lines[i].split("\t")
        row = {}
        for c, v in zip(TABLE_COLUMNS, parts):
            if c == "method":
                row[c] = v
            elif c in ("n_seeds", "n_failed"):
                row[c] = int(v)
            else:
                row[c] = float(v)
        rows.append(row)
        i += 1
    improvement = {}
    gaps = []
    for line in lines[i + 2 :]:
        if line.startswith("# gap"):
            _, r, v, m = line.split("\t")
            gaps.append({"radius_m": float(r), "speed_m_s": float(v), "method": m})
        elif line:
            m, pct = line.split("\t")
            improvement[m] = float(pct)
    return {"rows": rows, "gaps": gaps, "improvement": improvement}


def render_text(table: dict, key: str = "overall_median") -> str:
    """Radius-by-speed matrix of one metric; ``*`` marks the lowest value in each row."""
    methods = table.get("methods") or sorted({r["method"] for r in table["rows"]})
    winners = cell_winners(table, key)
    by_cell: dict = {}
    for row in table["rows"]:
        by_cell.setdefault((row["radius_m"], row["speed_m_s"]), {})[row["method"]] = row[key]
    width = max(14, max(len(m) for m in methods) + 2)
    header = f"{'radius [m]':>10} {'speed [m/s]':>11} " + "".join(f"{m:>{width}}" for m in methods)
    lines = [f"median overall position MSE [m^2] across seeds ({key})", header]
    for (r, v), vals in sorted(by_cell.items()):
        cells = []
        for m in methods:
            if m not in vals:
                cells.append(f"{'--':>{width}}")
                continue
            mark = "*" if winners.get((r, v)) == m else " "
            cells.append(f"{vals[m]:>{width - 1}.4g}{mark}")
        lines.append(f"{r:>10g} {v:>11g} " + "".join(cells))
    if table["improvement"]:
        lines.append("")
        lines.append(f"{OURS} improvement on grid-average MSE:")
        for m, pct in table["improvement"].items():
            lines.append(f"  vs {m}: {pct:.1f}%")
    if table["gaps"]:
        lines.append("")
        lines.append(f"missing cells: {len(table['gaps'])}")
    return "\n".join(lines) + "\n"


def render_axis_summary(summaries) -> str:
    """Quartiles of every method's per-axis MSE across all episodes."""
    lines = ["method axis q25 median q75"]
    methods = [m for m in METHODS if any(s["method"] == m for s in summaries)]
    for m in methods:
        ok = [s for s in summaries if s["method"] == m and not s["failed"]]
        for axis in ("overall", "x", "y", "z"):
            q25, med, q75 = quartiles([s["mse"][axis] for s in ok])
            lines.append(f"{m} {axis} {artifacts.fmt(q25)} {artifacts.fmt(med)} {artifacts.fmt(q75)}")
    return "\n".join(lines) + "\n"


def write_tables(table: dict, out_dir, summaries=None):
    out = Path(out_dir)
    artifacts._atomic_write(out / "results.tsv", dumps_table(table))
    artifacts._atomic_write(
        out / "table.txt",
        artifacts.schema_line("result-text", 1) + "\n" + render_text(table)
        + "\n" + render_text(table, "post_overall_median"),
    )
    if summaries is not None:
        artifacts._atomic_write(
            out / "axis_summary.txt",
            artifacts.schema_line("axis-summary", 1) + "\n" + render_axis_summary(summaries),
        )


def write_plot_columns(results_dir, out_dir=None) -> list:
    """Column files ``t, ref_x, x, ref_y, y, ref_z, z`` for each episode record."""
    results_dir = Path(results_dir)
    out = Path(out_dir) if out_dir is not None else results_dir / "plot"
    written = []
    for path in sorted((results_dir / "episodes").glob("*.txt")):
        cols = artifacts.load_episode_columns(path)
        lines = [artifacts.schema_line("plot-columns", 1), "t ref_x x ref_y y ref_z z"]
        for i in range(cols["t"].size):
            vals = [cols["t"][i]]
            for a in range(3):
                vals += [cols[f"ref{a}"][i], cols[f"x{a}"][i]]
            lines.append(" ".join(artifacts.fmt(v) for v in vals))
        target = out / path.name
        artifacts._atomic_write(target, "\n".join(lines) + "\n")
        written.append(target)
    return written


def write_report(results_dir, cfg: ExperimentConfig | None = None, plot_columns: bool = True) -> dict:
    """Rebuild the tables from a finished run directory; returns the table."""
    results_dir = Path(results_dir)
    summary = artifacts.load_summary(results_dir / "summary.txt")
    table = build_table(summary["episodes"], cfg)
    write_tables(table, results_dir, summary["episodes"])
    if plot_columns:
        write_plot_columns(results_dir)
    return table


def offline_loss_gap(offline_model, offline_log: EpisodeLog, low=(2.5, 5.0), high=(5.5, 8.0)) -> tuple:
    """One-step loss of the offline model on its own flight, light-mass vs heavy-mass phase."""
    return one_step_loss(offline_model, offline_log, low), one_step_loss(offline_model, offline_log, high)
