"""Command-line entry point: ``mildspde run --config cfg.toml --experiment solve``."""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, dump_config, load_config
from .experiments import EXPERIMENTS, ExperimentResult, run_experiment
from .solvers import ConvergenceError

EXIT_OK, EXIT_ASSERT, EXIT_CONFIG = 0, 1, 2


def _threads(arg: int | None, cfg: ExperimentConfig) -> int:
    if arg is not None:
        return arg
    env = os.environ.get("MILDSPDE_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"MILDSPDE_THREADS={env!r} is not an integer") from None
        if n < 1:
            raise ConfigError("MILDSPDE_THREADS must be positive")
        return n
    return cfg.run.threads or 1


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def write_artifacts(out_dir: Path, cfg: ExperimentConfig, experiment: str, result: ExperimentResult,
                    dump_paths: bool = False) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_csv(out_dir / "results.csv", result.header, result.rows)
    if dump_paths and result.paths is not None:
        _write_csv(out_dir / "paths.csv", ["path", "t", "mode", "re", "im"], result.path_rows())
    (out_dir / "config.echo").write_text(dump_config(cfg), encoding="utf-8")
    lines = [f"experiment: {experiment}", f"name: {cfg.name}", f"seed: {cfg.run.seed}", ""]
    lines += [c.line() for c in result.checks]
    if result.notes:
        lines += [""] + result.notes
    lines += ["", "overall: " + ("PASS" if result.passed else "FAIL")]
    (out_dir / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def run(config_path: str | Path, experiment: str, out: str | Path = "out", threads: int | None = None,
        seed: int | None = None, dump_paths: bool = False) -> int:
    """Run one experiment; returns the process exit code."""
    try:
        cfg = load_config(config_path)
        if seed is not None:
            if not 0 <= seed < 2**64:
                raise ConfigError("seed must fit in an unsigned 64-bit integer")
            cfg = cfg.model_copy(update={"run": cfg.run.model_copy(update={"seed": seed})})
        if experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {experiment!r}; choose from {', '.join(EXPERIMENTS)}")
        n_threads = _threads(threads, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        result = run_experiment(cfg, experiment, n_threads, Path(config_path).resolve().parent)
    except ConvergenceError as exc:
        print(f"assertion failed: {exc}", file=sys.stderr)
        return EXIT_ASSERT
    except (ValueError, KeyError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    write_artifacts(Path(out) / cfg.name, cfg, experiment, result, dump_paths)
    for c in result.checks:
        if not c.passed:
            print(f"assertion failed: {c.line()}", file=sys.stderr)
    return EXIT_OK if result.passed else EXIT_ASSERT


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mildspde", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run a named experiment")
    p.add_argument("--config", required=True, help="TOML experiment configuration")
    p.add_argument("--experiment", required=True, help=f"one of: {', '.join(EXPERIMENTS)}")
    p.add_argument("--out", default="out", help="output root (default: out)")
    p.add_argument("--threads", type=int, default=None, help="worker threads (default: $MILDSPDE_THREADS or 1)")
    p.add_argument("--seed", type=int, default=None, help="override the configured seed")
    p.add_argument("--dump-paths", action="store_true",
                   help="also write every solution path to paths.csv (solve, solve-mult, neutral)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    if args.threads is not None and args.threads < 1:
        print("config error: --threads must be positive", file=sys.stderr)
        return EXIT_CONFIG
    return run(args.config, args.experiment, args.out, args.threads, args.seed, args.dump_paths)


if __name__ == "__main__":
    sys.exit(main())
