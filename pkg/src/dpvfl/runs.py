"""Run-directory layout and deterministic serialization.

Every run directory contains the resolved config, a per-epoch CSV, a JSON
summary, a round-level event log, and model checkpoints. CSV floats use
``repr`` (shortest round-trip) so identical runs are byte-identical; wall
times appear only in ``summary.json`` and the timing table.
"""

from __future__ import annotations

import csv
import json
import shutil
from pathlib import Path

from .config import ExperimentConfig, load_config
from .errors import CheckpointError, ConfigError
from .experiment import RunResult, build_dataset, build_parties
from .neural import load_checkpoint, save_checkpoint
from .protocol import Parties, TrainingHistory

CONFIG_FILE = "resolved_config.json"
EPOCHS_FILE = "epochs.csv"
SUMMARY_FILE = "summary.json"
EVENTS_FILE = "events.log"
CHECKPOINT_DIR = "checkpoints"


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def prepare_run_dir(path, force: bool = False) -> Path:
    """Create the run directory, refusing to clobber an existing one unless forced."""
    path = Path(path)
    if path.exists() and any(path.iterdir()):
        if not force:
            raise ConfigError(
                f"run directory {path} already exists; pass --force to overwrite"
            )
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_config(run_dir: Path, cfg: ExperimentConfig) -> None:
    (run_dir / CONFIG_FILE).write_text(cfg.to_json() + "\n", encoding="utf-8")


def write_epochs_csv(run_dir: Path, history: TrainingHistory) -> Path:
    path = run_dir / EPOCHS_FILE
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow([
            "epoch", "train_loss", "train_accuracy", "test_accuracy",
            "mean_delta", "mean_purity",
        ])
        for em in history.epochs:
            deltas = list(em.mean_delta.values())
            purities = list(em.mean_purity.values())
            writer.writerow([
                em.epoch,
                _fmt(em.train_loss),
                _fmt(em.train_accuracy),
                _fmt(em.test_accuracy),
                _fmt(sum(deltas) / len(deltas) if deltas else None),
                _fmt(sum(purities) / len(purities) if purities else None),
            ])
    return path


class EventLog:
    """Round-level structured log, one sorted-key JSON object per line."""

    def __init__(self, run_dir: Path):
        self._path = Path(run_dir) / EVENTS_FILE
        self._handle = self._path.open("w", encoding="utf-8")

    def on_round(self, epoch: int, metrics) -> None:
        record = {
            "epoch": epoch,
            "round": metrics.round_index,
            "loss": metrics.loss,
            "accuracy": metrics.accuracy,
            "delta": {
                str(pid): s.delta_local
                for pid, s in metrics.party_stats.items() if s.delta_local is not None
            },
            "purity": {
                str(pid): s.purity
                for pid, s in metrics.party_stats.items() if s.purity is not None
            },
        }
        self._handle.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self) -> None:
        self._handle.close()


def write_summary(run_dir: Path, payload: dict) -> None:
    (run_dir / SUMMARY_FILE).write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def training_summary(result: RunResult, runtime_seconds: float) -> dict:
    cfg = result.config
    history = result.history
    final = history.epochs[-1] if history.epochs else None
    privacy = None
    passives = result.parties.passives
    if passives and passives[0].privacy is not None:
        p = passives[0].privacy
        privacy = {
            "epsilon": p.epsilon,
            "delta": p.delta,
            "clip_threshold": p.clip_threshold,
            "sigma": p.sigma,
            "delta_prime": p.delta_prime,
            "sigma_override": passives[0].sigma_override,
            "note": "per-round budget; no cross-round composition is claimed",
        }
    return {
        "dataset": {
            "kind": cfg.dataset.kind,
            "train_rows": result.data.train.n_rows,
            "test_rows": result.data.test.n_rows,
            "parties": result.data.train.n_parties,
            "n_classes": result.data.train.n_classes,
        },
        "privacy": privacy,
        "adaptive": {
            "rescale": cfg.adaptive.rescale,
            "dist_adjust": cfg.adaptive.dist_adjust,
        },
        "rounds": history.rounds,
        "final": None if final is None else {
            "train_loss": final.train_loss,
            "train_accuracy": final.train_accuracy,
            "test_accuracy": final.test_accuracy,
        },
        "seed": cfg.seed,
        "runtime_seconds": runtime_seconds,
    }


def save_checkpoints(run_dir: Path, parties: Parties) -> None:
    cp = run_dir / CHECKPOINT_DIR
    cp.mkdir(exist_ok=True)
    for party in parties.passives:
        save_checkpoint(party.extractor, cp / f"party_{party.party_id}.bin")
    save_checkpoint(parties.active.head, cp / "head.bin")


def load_run(run_dir) -> RunResult:
    """Rebuild a trained run from its directory (config + checkpoints).

    The dataset is regenerated deterministically from the resolved config;
    network weights come from the checkpoints.
    """
    run_dir = Path(run_dir)
    config_path = run_dir / CONFIG_FILE
    if not config_path.exists():
        raise ConfigError(f"{run_dir}: missing {CONFIG_FILE}")
    cfg = load_config(config_path)
    data = build_dataset(cfg)
    parties = build_parties(cfg, data)
    cp = run_dir / CHECKPOINT_DIR
    for party in parties.passives:
        path = cp / f"party_{party.party_id}.bin"
        if not path.exists():
            raise CheckpointError(f"missing checkpoint {path}")
        party.extractor = load_checkpoint(path)
    head_path = cp / "head.bin"
    if not head_path.exists():
        raise CheckpointError(f"missing checkpoint {head_path}")
    parties.active.head = load_checkpoint(head_path)
    return RunResult(config=cfg, data=data, parties=parties, history=TrainingHistory())


def write_table_csv(path, header: list[str], rows: list[list]) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(cell) for cell in row])
    return path
