"""Command-line entry point.

Exit codes: 0 success, 1 check or acceptance failure, 2 configuration
error, 3 runtime abort.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ..attention import save_checkpoint
from ..errors import ConfigError, DimensionError, DomainError, NumericError
from ..logs import MetricLog
from ..markov import write_dataset
from .config import ExperimentConfig, config_from_dict, load_config
from .experiment import ablation_table, make_datasets, run_ablation, run_experiment, simulate_flow
from .outputs import emit_outputs, ensure_writable, plot_flow, plot_training, write_table
from .verification import run_checks

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2, 3

log = logging.getLogger("stagewise")


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else config_from_dict({})
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def cmd_generate(cfg: ExperimentConfig, out: Path, args) -> int:
    spec = cfg.build_task()
    data = make_datasets(spec, cfg)
    write_dataset(out / "train.mktk", spec, data.train)
    write_dataset(out / "test.mktk", spec, data.test)
    emit_outputs(out, {}, config=cfg.to_dict(), seeds=[cfg.seed],
                 extra={"datasets": ["train.mktk", "test.mktk"], "task": spec.to_config()})
    print(f"wrote {len(data.train)} train and {len(data.test)} test sequences to {out}")
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig, out: Path, args) -> int:
    result = run_experiment(cfg)
    save_checkpoint(out / "model.modl1", result.params, cfg.optim.steps)
    plots = plot_training(result.log, out, cfg.task.h, cfg.task.w)
    emit_outputs(out, {"metrics": result.log}, config=cfg.to_dict(), seeds=[cfg.seed], plots=plots,
                 extra={"stages": result.stages.to_dict(), "summary": result.summary(),
                        "checkpoint": "model.modl1"})
    print(f"stages: {result.stages.to_dict()}")
    return EXIT_OK


def cmd_simulate_flow(cfg: ExperimentConfig, out: Path, args) -> int:
    run = simulate_flow(cfg)
    plots = plot_flow(run.trajectory.log, run.residuals, out)
    emit_outputs(out, {"trajectory": run.trajectory.log, "feature_residuals": run.residuals},
                 config=cfg.to_dict(), seeds=[cfg.seed], plots=plots,
                 extra={"crossing_times": run.crossings, "stop_reason": run.trajectory.stop_reason,
                        "total_renorm_correction": run.trajectory.total_correction})
    print(f"feature crossing times: {run.crossings}")
    return EXIT_ABORT if run.trajectory.nan_abort else EXIT_OK


def cmd_verify(cfg: ExperimentConfig, out: Path, args) -> int:
    results = run_checks(cfg)
    reports = [r for _, r in results]
    logs = {f"check_{i:02d}_{r.name}_seed{seed}": r.log for i, (seed, r) in enumerate(results) if r.log is not None}
    emit_outputs(out, logs, reports, config=cfg.to_dict(), seeds=list(cfg.verify.seeds))
    failed = False
    for seed, report in results:
        print(f"{report.name} seed={seed}: {report.status}")
        failed |= report.status in ("fail", "precondition unmet")
    return EXIT_FAILED if failed else EXIT_OK


def cmd_ablate(cfg: ExperimentConfig, out: Path, args) -> int:
    cells = run_ablation(cfg, threads=args.threads)
    logs = {f"cell_{i:02d}": c.log for i, c in enumerate(cells) if c.log is not None}
    rows = ablation_table(cells)
    write_table(out / "ablation_summary.csv", rows)
    emit_outputs(out, logs, config=cfg.to_dict(), seeds=[cfg.seed], plots=["ablation_summary.csv"],
                 extra={"cells": {f"cell_{i:02d}": c.name for i, c in enumerate(cells)}})
    for row in rows:
        print(row)
    return EXIT_OK


def cmd_plot(cfg: ExperimentConfig, out: Path, args) -> int:
    source = Path(args.input) if args.input else out
    written = []
    metrics = source / "metrics.csv"
    trajectory = source / "trajectory.csv"
    if metrics.exists():
        written += plot_training(MetricLog.read_csv(metrics), out, cfg.task.h, cfg.task.w)
    if trajectory.exists():
        residuals = source / "feature_residuals.csv"
        written += plot_flow(MetricLog.read_csv(trajectory),
                             MetricLog.read_csv(residuals) if residuals.exists() else None, out)
    if not written:
        raise ConfigError(f"no metrics.csv or trajectory.csv in {source}")
    print("\n".join(written))
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "simulate-flow": cmd_simulate_flow,
            "verify": cmd_verify, "ablate": cmd_ablate, "plot": cmd_plot}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stagewise", description="Stage-wise learning experiments and checks.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML experiment configuration")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--threads", type=int, default=1, help="concurrent cells or checks")
        if name == "plot":
            p.add_argument("--input", help="directory holding metrics.csv or trajectory.csv")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = _load(args)
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        out = ensure_writable(args.out)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"cannot write to {args.out}: {exc}", file=sys.stderr)
        return EXIT_ABORT
    try:
        return COMMANDS[args.command](cfg, out, args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, DomainError, DimensionError, OSError, FloatingPointError) as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
