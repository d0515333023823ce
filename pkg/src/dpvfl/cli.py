"""Config-driven experiment runner.

Subcommands: ``train`` (one run), ``ablate`` (the 4-row toggle grid over
seeds), ``attack`` (inversion + membership inference against trained
victims), ``timing`` (stage wall-time breakdown). Exit codes: 0 success,
1 runtime failure, 2 config or usage error.
"""

from __future__ import annotations

import argparse
import logging
import os
import statistics
import sys
import time
from dataclasses import replace
from pathlib import Path

from .config import ExperimentConfig, load_config
from .errors import CheckpointError, ConfigError, VflError
from .experiment import measure_stage_times, run_attack_suite, run_training
from . import runs

OUT_ROOT_ENV = "DPVFL_OUT"

ABLATION_GRID = (
    ("vanilla", False, False),
    ("vanilla+rescale", True, False),
    ("vanilla+distadj", False, True),
    ("full", True, True),
)


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dpvfl",
        description="Differentially private vertical federated learning "
                    "with utility-recovering embedding adjustments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default=None,
                       help=f"output directory (default: ${OUT_ROOT_ENV} or ./runs)")
        p.add_argument("--force", action="store_true",
                       help="overwrite an existing run directory")
        p.add_argument("--toggle-rescale", type=_parse_bool, default=None,
                       metavar="BOOL", help="override adaptive.rescale")
        p.add_argument("--toggle-distadj", type=_parse_bool, default=None,
                       metavar="BOOL", help="override adaptive.dist_adjust")

    common(sub.add_parser("train", help="train one configuration"))
    common(sub.add_parser("ablate", help="run the vanilla/+R/+D/full grid"))
    attack = sub.add_parser("attack", help="attack trained victim runs")
    common(attack)
    attack.add_argument("--victims", required=True,
                        help="directory of victim run directories (one per tag)")
    common(sub.add_parser("timing", help="measure the stage time breakdown"))
    return parser


def _resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise ConfigError(f"--seed must fit in u64, got {args.seed}")
        cfg = replace(cfg, seed=args.seed)
    if args.toggle_rescale is not None:
        cfg = replace(cfg, adaptive=replace(cfg.adaptive, rescale=args.toggle_rescale))
    if args.toggle_distadj is not None:
        cfg = replace(cfg, adaptive=replace(cfg.adaptive, dist_adjust=args.toggle_distadj))
    return cfg


def _out_dir(args, cfg: ExperimentConfig, default_name: str) -> Path:
    if args.out:
        return Path(args.out)
    if cfg.out_dir:
        return Path(cfg.out_dir)
    root = os.environ.get(OUT_ROOT_ENV, "runs")
    return Path(root) / default_name


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    run_dir = runs.prepare_run_dir(
        _out_dir(args, cfg, f"train-seed{cfg.seed}"), force=args.force
    )
    runs.write_config(run_dir, cfg)
    log = runs.EventLog(run_dir)
    started = time.perf_counter()
    try:
        result = run_training(cfg, on_round=log.on_round)
    finally:
        log.close()
    runtime = time.perf_counter() - started
    runs.write_epochs_csv(run_dir, result.history)
    runs.save_checkpoints(run_dir, result.parties)
    runs.write_summary(run_dir, runs.training_summary(result, runtime))
    final = result.history.epochs[-1] if result.history.epochs else None
    if final is not None:
        print(f"train: test_accuracy={final.test_accuracy:.4f} "
              f"loss={final.train_loss:.4f} rounds={result.history.rounds}")
    print(f"run directory: {run_dir}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    run_dir = runs.prepare_run_dir(
        _out_dir(args, cfg, f"ablate-seed{cfg.seed}"), force=args.force
    )
    runs.write_config(run_dir, cfg)
    seeds = cfg.ablate.seeds or [cfg.seed]
    rows = []
    cell_accuracies: dict[str, list[float]] = {}
    for method, rescale_on, distadj_on in ABLATION_GRID:
        cell_cfg = replace(
            cfg,
            adaptive=replace(cfg.adaptive, rescale=rescale_on, dist_adjust=distadj_on),
        )
        accuracies = []
        for seed in seeds:
            cell_dir = run_dir / f"{method.replace('+', '_')}-seed{seed}"
            cell_dir.mkdir(parents=True, exist_ok=True)
            seeded = replace(cell_cfg, seed=seed)
            runs.write_config(cell_dir, seeded)
            result = run_training(seeded)
            runs.write_epochs_csv(cell_dir, result.history)
            accuracies.append(result.history.epochs[-1].test_accuracy)
        cell_accuracies[method] = accuracies
        mean = statistics.fmean(accuracies)
        std = statistics.pstdev(accuracies) if len(accuracies) > 1 else 0.0
        rows.append([method, len(seeds), mean, std])
        print(f"ablate: {method:16s} accuracy={mean:.4f} +- {std:.4f}")
    runs.write_table_csv(
        run_dir / "ablation.csv",
        ["method", "seeds", "accuracy_mean", "accuracy_std"],
        rows,
    )
    runs.write_summary(run_dir, {
        "seeds": seeds,
        "cells": cell_accuracies,
    })
    print(f"run directory: {run_dir}")
    return 0


def cmd_attack(args) -> int:
    cfg = _resolve_config(args)
    victims_root = Path(args.victims)
    if not victims_root.is_dir():
        raise ConfigError(f"victims directory not found: {victims_root}")
    victim_dirs = sorted(p for p in victims_root.iterdir() if p.is_dir())
    if not victim_dirs:
        raise ConfigError(f"no victim run directories under {victims_root}")
    victims = {p.name: runs.load_run(p) for p in victim_dirs}
    run_dir = runs.prepare_run_dir(
        _out_dir(args, cfg, f"attack-seed{cfg.seed}"), force=args.force
    )
    runs.write_config(run_dir, cfg)
    reports = run_attack_suite(cfg, victims)
    by_victim: dict[str, dict] = {}
    for report in reports:
        by_victim.setdefault(report.victim, {})[report.kind] = report
    rows = []
    for tag in sorted(by_victim):
        inversion = by_victim[tag].get("inversion")
        mi = by_victim[tag].get("membership_inference")
        rows.append([
            tag,
            None if mi is None else mi.metric,
            None if inversion is None else inversion.metric,
        ])
        print(f"attack: {tag:12s} mi_accuracy="
              f"{'n/a' if mi is None else f'{mi.metric:.4f}'} "
              f"inversion_mse="
              f"{'n/a' if inversion is None else f'{inversion.metric:.6f}'}")
    runs.write_table_csv(
        run_dir / "attacks.csv",
        ["victim", "mi_accuracy", "inversion_mse"],
        rows,
    )
    runs.write_summary(run_dir, {
        "reports": [
            {
                "kind": r.kind, "victim": r.victim, "metric": r.metric,
                "trials": r.trials, "failed_trials": r.failed_trials,
                "seed": r.seed, "details": r.details,
            }
            for r in reports
        ],
    })
    print(f"run directory: {run_dir}")
    return 0


def cmd_timing(args) -> int:
    cfg = _resolve_config(args)
    run_dir = runs.prepare_run_dir(
        _out_dir(args, cfg, f"timing-seed{cfg.seed}"), force=args.force
    )
    runs.write_config(run_dir, cfg)
    seconds = measure_stage_times(cfg)
    total = sum(seconds.values())
    rows = []
    for stage in ("base", "noise", "rescale", "dist_adjust"):
        share = 100.0 * seconds[stage] / total if total > 0 else 0.0
        rows.append([stage, seconds[stage] * 1000.0, share])
        print(f"timing: {stage:12s} {seconds[stage] * 1000.0:10.2f} ms  {share:6.2f}%")
    runs.write_table_csv(
        run_dir / "timing.csv", ["stage", "time_ms", "share_pct"], rows
    )
    runs.write_summary(run_dir, {
        "rounds": cfg.timing.rounds,
        "batch_size": cfg.timing.batch_size or cfg.training.batch_size,
        "seconds": seconds,
    })
    print(f"run directory: {run_dir}")
    return 0


_COMMANDS = {
    "train": cmd_train,
    "ablate": cmd_ablate,
    "attack": cmd_attack,
    "timing": cmd_timing,
}


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("DPVFL_LOG", "WARNING"))
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except VflError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
