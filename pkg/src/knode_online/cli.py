"""Command-line entry point; each verb maps to one ``cmd_*`` function below.

Exit codes:

- 0: success
- 1: configuration error
- 2: runtime failure, which under ``--strict`` includes failed episodes or missing cells
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import artifacts, bench
from .config import ExperimentConfig, load_config, require_offline_window, save_config
from .mpc import ConfigError
from .sim import offline_pipeline

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2

log = logging.getLogger("knode_online")


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.replace("grid", seeds=(args.seed,))
    if args.out is not None:
        cfg = cfg.replace(output_dir=str(args.out))
    return cfg


def cmd_run(args) -> int:
    cfg = _load(args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")
    result = bench.run_grid(cfg, out, checkpoint_publishes=not args.final_checkpoints_only)
    table = bench.build_table(result.summaries, cfg)
    bench.write_tables(table, out, result.summaries)
    print(bench.render_text(table), end="")
    failed = [s for s in result.summaries if s["failed"]]
    if failed:
        log.warning("%d episode(s) failed; see summary.txt", len(failed))
    if args.strict and (failed or table["gaps"]):
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_train_offline(args) -> int:
    cfg = _load(args)
    require_offline_window(cfg)
    scenario = cfg.scenarios()[0]
    seed = cfg.grid.seeds[0]
    model = offline_pipeline(scenario, cfg.episode_settings(), seed)
    out = Path(cfg.output_dir)
    path = out / f"offline_{scenario.label}_seed{seed}.ckpt"
    artifacts.save_checkpoint(model, path)
    print(path)
    return EXIT_OK


def cmd_report(args) -> int:
    results_dir = Path(args.out if args.out is not None else (args.results or "results"))
    cfg = None
    if args.config:
        cfg = load_config(args.config)
    elif (results_dir / "config.yaml").exists():
        cfg = load_config(results_dir / "config.yaml")
    if not (results_dir / "summary.txt").exists():
        print(f"no run summary in {results_dir}", file=sys.stderr)
        return EXIT_RUNTIME
    table = bench.write_report(results_dir, cfg)
    print(bench.render_text(table), end="")
    if table["gaps"]:
        for gap in table["gaps"]:
            print(f"gap: R={gap['radius_m']:g} v={gap['speed_m_s']:g} {gap['method']}", file=sys.stderr)
        if args.strict:
            return EXIT_RUNTIME
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config (YAML); defaults built in if omitted")
    common.add_argument("--out", type=Path, help="output directory (overrides output_dir in the config)")
    common.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
    common.add_argument("--strict", action="store_true", help="exit 2 on failed episodes or missing cells")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="knode-online", description="Fly the quadrotor benchmark grid with online-updated KNODE models."
    )
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", parents=[common], help="fly the scenario grid and write logs and tables")
    run.add_argument(
        "--final-checkpoints-only", action="store_true",
        help="write only each episode's final model instead of every published snapshot",
    )
    run.set_defaults(func=cmd_run)
    train = sub.add_parser("train-offline", parents=[common], help="train the offline model for the first scenario")
    train.set_defaults(func=cmd_train_offline)
    report = sub.add_parser("report", parents=[common], help="rebuild tables and plot columns from a run directory")
    report.add_argument("results", nargs="?", help="run directory (same as --out)")
    report.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; here that is a configuration problem
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (artifacts.ArtifactError, OSError, ArithmeticError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
