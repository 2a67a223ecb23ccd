"""Experiment orchestration: config files, the full pipeline, reports.

One experiment is: build (or load) a dataset, carve out the user's
personalized subset, pretrain on the full data, probe the model with
random ablation trials on the user's training split, classify layers
into tiers, iteratively prune with fine-tuning, then report against the
held-out user eval split.  Every stage draws from a seed derived from
the experiment seed and the stage name, so a config plus a seed pins
the whole run.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .checkpoint import save_checkpoint
from .data import (
    Dataset,
    PersonalizationSpec,
    load_cifar10_bin,
    personalize,
    split,
    synth_dataset,
)
from .errors import ConfigError, FormatError, StageError, TierPruneError
from .model import ViTConfig, accuracy, build_model, dataset_loss, train
from .probe import (
    GENERIC,
    OTHER,
    PERSONALIZED,
    baseline_loss,
    classify,
    observe_trials,
    refine_personalized,
    sample_trials,
)
from .pruner import (
    PruneHistory,
    PruneSchedule,
    RoundRecord,
    compression,
    iterative_prune,
)

SWEEP_AXES = {
    "prune_rate": "prob",
    "random_number": "random_number",
    "criterion": "criterion",
    "prune_personalized": "prune_personalized",
}

# Reports label the intermediate tier "buffer"; mechanics keep OTHER.
TIER_LABELS = {PERSONALIZED: "personalized", GENERIC: "generic", OTHER: "buffer"}

SUMMARY_HEADER = (
    "seed", "prob", "criterion", "random_number", "rounds", "prune_personalized",
    "personalized_count", "generic_count", "buffer_count",
    "baseline_loss", "baseline_accuracy", "final_loss", "final_accuracy",
    "compression", "compression_pct", "accuracy_pct",
)

SWEEP_HEADER = ("axis", "value", "status") + SUMMARY_HEADER

REPORT_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ExperimentConfig:
    """Flat experiment description; every field has a JSON-spelled name."""

    # model
    image_size: int = 32
    patch_size: int = 4
    embed_dim: int = 64
    num_heads: int = 4
    depth: int = 4
    mlp_ratio: int = 2
    num_classes: int = 10
    # dataset
    dataset: str = "synthetic"
    cifar10_paths: tuple[str, ...] = ()
    synth_per_class: int = 32
    synth_noise: float = 0.1
    # personalization
    kept_classes: tuple[int, ...] | None = None
    per_class_cap: int | None = None
    train_fraction: float = 0.75
    # pretraining
    pretrain_epochs: int = 10
    pretrain_lr: float = 0.15
    batch_size: int = 32
    # probe
    random_number: int = 4
    num_trials: int | None = None
    margin: float | None = None
    refine_budget: int = 16
    # prune schedule
    prob: float = 0.04
    criterion: str = "weight"
    rounds: int = 10
    finetune_epochs: int = 1
    finetune_lr: float = 0.05
    prune_personalized: bool = True
    # run
    seed: int = 0
    out_dir: str | None = None

    def __post_init__(self):
        if self.dataset not in ("synthetic", "cifar10"):
            raise ConfigError(f"dataset must be 'synthetic' or 'cifar10', got {self.dataset!r}")
        if self.dataset == "cifar10" and not self.cifar10_paths:
            raise ConfigError("cifar10 dataset needs cifar10_paths")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(f"train_fraction must lie in (0,1), got {self.train_fraction}")
        if self.pretrain_epochs < 0:
            raise ConfigError(f"pretrain_epochs must be >= 0, got {self.pretrain_epochs}")
        if self.pretrain_epochs > 0 and self.pretrain_lr <= 0:
            raise ConfigError(f"pretrain_lr must be positive, got {self.pretrain_lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.synth_per_class < 1:
            raise ConfigError(f"synth_per_class must be >= 1, got {self.synth_per_class}")
        if self.synth_noise < 0:
            raise ConfigError(f"synth_noise must be >= 0, got {self.synth_noise}")
        if self.random_number < 1:
            raise ConfigError(f"random_number must be >= 1, got {self.random_number}")
        if self.num_trials is not None and self.num_trials < 1:
            raise ConfigError(f"num_trials must be >= 1, got {self.num_trials}")
        if self.margin is not None and self.margin < 0:
            raise ConfigError(f"margin must be >= 0, got {self.margin}")
        if self.refine_budget < 0:
            raise ConfigError(f"refine_budget must be >= 0, got {self.refine_budget}")
        if self.kept_classes is not None:
            object.__setattr__(self, "kept_classes", tuple(int(c) for c in self.kept_classes))
        object.__setattr__(self, "cifar10_paths", tuple(self.cifar10_paths))
        # fail fast on sub-config problems
        self.model_config()
        self.schedule()

    def model_config(self) -> ViTConfig:
        return ViTConfig(
            image_size=self.image_size, patch_size=self.patch_size,
            embed_dim=self.embed_dim, num_heads=self.num_heads,
            depth=self.depth, mlp_ratio=self.mlp_ratio,
            num_classes=self.num_classes, seed=self.stage_seed("init"),
        )

    def schedule(self) -> PruneSchedule:
        return PruneSchedule(
            prob=self.prob, criterion=self.criterion, rounds=self.rounds,
            finetune_epochs_per_round=self.finetune_epochs, lr=self.finetune_lr,
            prune_personalized=self.prune_personalized,
            seed=self.stage_seed("prune"),
        )

    def stage_seed(self, label: str) -> int:
        seq = np.random.SeedSequence(entropy=(self.seed, zlib.crc32(label.encode())))
        return int(seq.generate_state(1)[0])

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def load_config(path, **overrides) -> ExperimentConfig:
    """Parse a flat JSON config file; unknown keys are an error."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON: {err}") from err
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {unknown}")
    raw.update(overrides)
    return ExperimentConfig(**raw)


@dataclass
class ExperimentReport:
    """Everything one run measured, plus enough context to rerun it."""

    config: dict
    version: str
    baseline_loss: float
    baseline_accuracy: float
    threshold_margin: float
    tier_counts: dict[str, int]
    tiers: dict[int, str]
    history: PruneHistory
    final_compression: float
    final_accuracy: float
    final_loss: float
    timings: dict[str, float] = field(default_factory=dict)

    def summary_row(self) -> list[str]:
        cfg = self.config
        return [
            str(cfg["seed"]), repr(cfg["prob"]), cfg["criterion"],
            str(cfg["random_number"]), str(cfg["rounds"]),
            str(bool(cfg["prune_personalized"])).lower(),
            str(self.tier_counts[PERSONALIZED]),
            str(self.tier_counts[GENERIC]),
            str(self.tier_counts[OTHER]),
            repr(self.baseline_loss), repr(self.baseline_accuracy),
            repr(self.final_loss), repr(self.final_accuracy),
            repr(self.final_compression),
            f"{100 * self.final_compression:.1f}",
            f"{100 * self.final_accuracy:.1f}",
        ]

    def to_json_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "version": self.version,
            "config": self.config,
            "baseline_loss": self.baseline_loss,
            "baseline_accuracy": self.baseline_accuracy,
            "threshold_margin": self.threshold_margin,
            "tier_counts": {TIER_LABELS[t]: n for t, n in self.tier_counts.items()},
            "tiers": {str(s): TIER_LABELS[t] for s, t in sorted(self.tiers.items())},
            "prune_history": self._labeled_summary(),
            "rounds": [dataclasses.asdict(r) for r in self.history.records],
            "final_compression": self.final_compression,
            "final_accuracy": self.final_accuracy,
            "final_loss": self.final_loss,
            "timings": dict(self.timings),
        }

    def _labeled_summary(self) -> dict:
        summary = self.history.summary()
        summary["tiers"] = {s: TIER_LABELS[t] for s, t in summary["tiers"].items()}
        return summary

    def history_rows(self) -> list[list]:
        rows = self.history.csv_rows()
        for row in rows[1:]:
            row[2] = TIER_LABELS[row[2]]
        return rows


class _Stopwatch:
    def __init__(self):
        self.laps: dict[str, float] = {}

    def time(self, label: str):
        laps = self.laps

        class _Lap:
            def __enter__(self):
                self.start = time.perf_counter()
                return self

            def __exit__(self, *exc):
                laps[label] = laps.get(label, 0.0) + time.perf_counter() - self.start
                return False

        return _Lap()


def _build_dataset(config: ExperimentConfig) -> Dataset:
    if config.dataset == "cifar10":
        return load_cifar10_bin(list(config.cifar10_paths))
    return synth_dataset(
        num_classes=config.num_classes,
        per_class=config.synth_per_class,
        image_size=config.image_size,
        seed=config.stage_seed("data"),
        noise=config.synth_noise,
    )


def run_experiment(config: ExperimentConfig) -> ExperimentReport:
    """Execute the full pipeline; write artifacts when out_dir is set.

    Stages: data -> personalize -> pretrain -> probe -> prune ->
    evaluate -> report.  A failure is re-raised as a StageError naming
    the stage; logs written before the failure stay on disk.
    """
    watch = _Stopwatch()
    out_dir = config.out_dir
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    def run_stage(name, fn):
        try:
            with watch.time(name):
                return fn()
        except Exception as err:
            raise StageError(name, err) from err

    full = run_stage("data", lambda: _build_dataset(config))

    def do_personalize():
        kept = config.kept_classes
        if kept is None:
            kept = tuple(range(full.num_classes))
        spec = PersonalizationSpec(
            kept_classes=kept, per_class_cap=config.per_class_cap,
            seed=config.stage_seed("personalize"),
        )
        d_user = personalize(full, spec, reindex=False)
        return split(d_user, config.train_fraction, seed=config.stage_seed("split"))

    user_train, user_eval = run_stage("personalize", do_personalize)

    def do_pretrain():
        model = build_model(config.model_config())
        if config.pretrain_epochs > 0:
            train(model, full, epochs=config.pretrain_epochs, lr=config.pretrain_lr,
                  batch_size=config.batch_size, seed=config.stage_seed("pretrain"))
        return model

    model = run_stage("pretrain", do_pretrain)

    def do_probe():
        eval_acc = accuracy(model, user_eval)
        threshold = baseline_loss(model, user_train, margin=config.margin)
        num_layers = 4 * config.depth
        trials = sample_trials(
            num_layers, config.random_number, config.num_trials,
            seed=config.stage_seed("trials"),
        )
        log_path = os.path.join(out_dir, "trial_log.csv") if out_dir else None
        observed = observe_trials(model, user_train, trials, log_path=log_path)
        assignment = classify(observed, threshold, num_layers)
        refined = refine_personalized(
            model, user_train, assignment, threshold, budget=config.refine_budget,
        )
        return threshold, refined, eval_acc

    threshold, assignment, baseline_eval_acc = run_stage("probe", do_probe)

    history = run_stage("prune", lambda: iterative_prune(
        model, user_train, assignment.tiers, config.schedule(),
        eval_dataset=user_eval, batch_size=config.batch_size,
    ))

    def do_evaluate():
        return compression(model), dataset_loss(model, user_eval), accuracy(model, user_eval)

    final_compression, final_loss, final_accuracy = run_stage("evaluate", do_evaluate)

    tier_counts = {
        tier: len(assignment.layers_in(tier))
        for tier in (PERSONALIZED, GENERIC, OTHER)
    }
    report = ExperimentReport(
        config=dataclasses.asdict(config),
        version=__version__,
        baseline_loss=threshold.baseline_loss,
        baseline_accuracy=baseline_eval_acc,
        threshold_margin=threshold.margin,
        tier_counts=tier_counts,
        tiers=dict(assignment.tiers),
        history=history,
        final_compression=final_compression,
        final_accuracy=final_accuracy,
        final_loss=final_loss,
        timings=watch.laps,
    )

    if out_dir:
        def do_report():
            emit_report(report, "csv", out_dir)
            emit_report(report, "json", out_dir)
            save_checkpoint(model, os.path.join(out_dir, "model.tprn"))

        run_stage("report", do_report)
        report.timings = watch.laps
    return report


def emit_report(report: ExperimentReport, format: str, out_dir) -> list[str]:
    """Write the report files for one format; returns the paths written.

    CSV output is byte-deterministic for a given config and seed: the
    summary row and per-round history carry no timings.  Timings live
    only in the JSON document.
    """
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    if format == "csv":
        summary_path = os.path.join(out_dir, "report.csv")
        with open(summary_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(SUMMARY_HEADER)
            writer.writerow(report.summary_row())
        history_path = os.path.join(out_dir, "history.csv")
        with open(history_path, "w", newline="") as fh:
            csv.writer(fh).writerows(report.history_rows())
        paths += [summary_path, history_path]
    elif format == "json":
        json_path = os.path.join(out_dir, "report.json")
        with open(json_path, "w") as fh:
            json.dump(report.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        paths.append(json_path)
    else:
        raise ConfigError(f"unknown report format {format!r}")
    return paths


def parse_summary_csv(path) -> dict:
    """Read back a summary row as a {column: string} mapping."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) != 2 or tuple(rows[0]) != SUMMARY_HEADER:
        raise ConfigError(f"{path}: not a report summary file")
    return dict(zip(rows[0], rows[1]))


_LABEL_TIERS = {label: tier for tier, label in TIER_LABELS.items()}


def load_report(run_dir) -> ExperimentReport:
    """Rebuild an ExperimentReport from a run directory's report.json."""
    path = os.path.join(run_dir, "report.json")
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as err:
        raise FormatError(f"{path}: {err}") from err
    if not isinstance(doc, dict) or doc.get("schema_version") != REPORT_SCHEMA_VERSION:
        raise FormatError(f"{path}: expected report schema {REPORT_SCHEMA_VERSION}")
    try:
        summary = doc["prune_history"]
        history = PruneHistory(
            tiers={int(s): _LABEL_TIERS[t] for s, t in summary["tiers"].items()},
            step_probs={int(s): p for s, p in summary["step_probs"].items()},
            records=[
                RoundRecord(
                    round_index=r["round_index"],
                    pruned={int(s): n for s, n in r["pruned"].items()},
                    compression=r["compression"], loss=r["loss"],
                    accuracy=r["accuracy"],
                )
                for r in doc["rounds"]
            ],
        )
        return ExperimentReport(
            config=dict(doc["config"]),
            version=doc["version"],
            baseline_loss=doc["baseline_loss"],
            baseline_accuracy=doc["baseline_accuracy"],
            threshold_margin=doc["threshold_margin"],
            tier_counts={_LABEL_TIERS[t]: n for t, n in doc["tier_counts"].items()},
            tiers={int(s): _LABEL_TIERS[t] for s, t in doc["tiers"].items()},
            history=history,
            final_compression=doc["final_compression"],
            final_accuracy=doc["final_accuracy"],
            final_loss=doc["final_loss"],
            timings=dict(doc.get("timings", {})),
        )
    except (KeyError, TypeError, ValueError) as err:
        raise FormatError(f"{path}: malformed report field: {err!r}") from err


def sweep(base_config: ExperimentConfig, axis: str, values) -> list[dict]:
    """One run per value along a named axis; failures don't stop the sweep.

    Returns one record per value: {value, status, report or error}.
    Writes sweep.csv plus per-cell artifact directories when the base
    config has an out_dir.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(f"axis must be one of {sorted(SWEEP_AXES)}, got {axis!r}")
    values = list(values)
    if not values:
        raise ConfigError("sweep needs at least one value")
    field_name = SWEEP_AXES[axis]
    results = []
    for value in values:
        changes = {field_name: value}
        if base_config.out_dir:
            changes["out_dir"] = os.path.join(base_config.out_dir, f"{axis}={value}")
        try:
            cell = base_config.replace(**changes)
            report = run_experiment(cell)
            results.append({"value": value, "status": "ok", "report": report})
        except TierPruneError as err:
            results.append({"value": value, "status": "error", "error": str(err)})
    if base_config.out_dir:
        write_sweep_csv(results, axis, os.path.join(base_config.out_dir, "sweep.csv"))
    return results


def write_sweep_csv(results: list[dict], axis: str, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_HEADER)
        for cell in results:
            if cell["status"] == "ok":
                writer.writerow([axis, cell["value"], "ok"] + cell["report"].summary_row())
            else:
                row = [axis, cell["value"], "error"] + [""] * len(SUMMARY_HEADER)
                writer.writerow(row)
