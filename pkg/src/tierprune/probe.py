"""Random-ablation probing and layer tier classification.

The probe asks which linear groups matter for the user's data: each
trial ablates a random k-subset of groups (their outputs forced to
zero), records the dataset loss, and the threshold rule turns those
observations into tiers.  A trial whose loss lands above the baseline
by more than the margin votes all its layers into the Personalized
candidate set; below by more than the margin votes them Generic; layers
with no decisive vote stay Other.  Personalized wins conflicts.
"""

from __future__ import annotations

import csv
import dataclasses
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError, UsageError
from .model import MiniViT, dataset_loss

PERSONALIZED = "personalized"
GENERIC = "generic"
OTHER = "other"

TRIAL_LOG_HEADER = ("trial", "layer_ids", "observed_loss", "seconds")


@dataclass(frozen=True)
class MaskTrial:
    """One observation row: ablate ``layer_ids`` together, read the loss.

    ``observed_loss`` is ``None`` until observed; a failed observation
    (non-finite loss) is recorded as NaN and never classified.
    """

    layer_ids: tuple[int, ...]
    observed_loss: float | None = None

    def __post_init__(self):
        ids = tuple(int(i) for i in self.layer_ids)
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate layer ids in trial: {ids}")
        object.__setattr__(self, "layer_ids", tuple(sorted(ids)))

    @property
    def failed(self) -> bool:
        return self.observed_loss is not None and math.isnan(self.observed_loss)


@dataclass(frozen=True)
class ThresholdSpec:
    """Comparison point for classification: untouched-model loss ± margin."""

    baseline_loss: float
    margin: float

    def __post_init__(self):
        if not math.isfinite(self.baseline_loss):
            raise NumericError(f"baseline loss is {self.baseline_loss}")
        if self.margin < 0:
            raise ConfigError(f"margin must be nonnegative, got {self.margin}")

    @property
    def upper(self) -> float:
        return self.baseline_loss + self.margin

    @property
    def lower(self) -> float:
        return self.baseline_loss - self.margin


@dataclass(frozen=True)
class TierAssignment:
    """Tier per layer plus, per layer, the trial indices that voted."""

    tiers: dict[int, str]
    provenance: dict[int, list[int]]

    def layers_in(self, tier: str) -> list[int]:
        return sorted(s for s, t in self.tiers.items() if t == tier)


def baseline_loss(model: MiniViT, dataset, margin: float | None = None,
                  batch_size: int = 256) -> ThresholdSpec:
    """Loss of the untouched model; margin defaults to 2% of it."""
    if any(g.is_skip for g in model.linear_groups()):
        raise UsageError("baseline requires all ablation flags clear")
    loss = dataset_loss(model, dataset, batch_size)
    if margin is None:
        margin = 0.02 * loss
    return ThresholdSpec(baseline_loss=loss, margin=margin)


def sample_trials(num_layers: int, random_number: int,
                  num_trials: int | None = None, seed: int = 0,
                  exhaustive: bool = False) -> list[MaskTrial]:
    """Draw trial rows: uniform k-subsets, independent across trials.

    ``exhaustive`` switches to coverage-forcing mode: a seeded
    permutation of all layers is cut into consecutive k-chunks so every
    layer appears exactly once (requires k to divide num_layers).
    Default trial count is 3 * ceil(num_layers / k), giving each layer
    about three expected votes.
    """
    k = random_number
    if num_layers < 1:
        raise ConfigError(f"num_layers must be positive, got {num_layers}")
    if not 1 <= k <= num_layers:
        raise ConfigError(f"random_number {k} outside 1..{num_layers}")
    rng = np.random.default_rng(seed)
    if exhaustive:
        if num_layers % k != 0:
            raise ConfigError(
                f"exhaustive mode needs random_number {k} to divide {num_layers} layers"
            )
        perm = rng.permutation(num_layers)
        return [
            MaskTrial(tuple(perm[i: i + k].tolist()))
            for i in range(0, num_layers, k)
        ]
    n = num_trials if num_trials is not None else 3 * math.ceil(num_layers / k)
    if n < 1:
        raise ConfigError(f"num_trials must be >= 1, got {n}")
    return [
        MaskTrial(tuple(rng.choice(num_layers, size=k, replace=False).tolist()))
        for _ in range(n)
    ]


def observe(model: MiniViT, dataset, trial: MaskTrial, batch_size: int = 256) -> float:
    """Loss with exactly the trial's layers ablated; flags restored after.

    Weights are untouched: ablation rides entirely on the skip flags,
    and every flag is cleared again even if evaluation raises.
    """
    groups = model.linear_groups()
    valid = range(len(groups))
    bad = [i for i in trial.layer_ids if i not in valid]
    if bad:
        raise ConfigError(f"trial names unknown layers {bad}")
    wanted = set(trial.layer_ids)
    try:
        for g in groups:
            g.is_skip = g.layer_number in wanted
        return dataset_loss(model, dataset, batch_size)
    finally:
        for g in groups:
            g.is_skip = False


def _thread_count(requested: int | None, num_trials: int) -> int:
    if requested is None:
        env = os.environ.get("TIERPRUNE_THREADS")
        requested = int(env) if env else 1
    if requested < 1:
        raise ConfigError(f"thread count must be >= 1, got {requested}")
    return min(requested, num_trials)


def observe_trials(model: MiniViT, dataset, trials: list[MaskTrial],
                   batch_size: int = 256, threads: int | None = None,
                   log_path=None) -> list[MaskTrial]:
    """Observe every trial, optionally in parallel over model replicas.

    Results come back in trial order regardless of scheduling; a trial
    whose evaluation produces a non-finite loss is kept with NaN.  The
    TIERPRUNE_THREADS environment variable caps parallelism when no
    explicit thread count is given.  ``log_path`` appends one CSV record
    per trial: index, layer ids, loss, wall seconds.
    """
    nthreads = _thread_count(threads, max(len(trials), 1))

    def run_one(trial: MaskTrial) -> tuple[float, float]:
        replica = model.clone() if nthreads > 1 else model
        start = time.perf_counter()
        try:
            loss = observe(replica, dataset, trial, batch_size)
        except NumericError:
            loss = float("nan")
        return loss, time.perf_counter() - start

    if nthreads > 1:
        with ThreadPoolExecutor(max_workers=nthreads) as pool:
            outcomes = list(pool.map(run_one, trials))
    else:
        outcomes = [run_one(t) for t in trials]

    observed = [
        dataclasses.replace(t, observed_loss=loss)
        for t, (loss, _) in zip(trials, outcomes)
    ]
    if log_path is not None:
        fresh = not os.path.exists(log_path) or os.path.getsize(log_path) == 0
        with open(log_path, "a", newline="") as fh:
            writer = csv.writer(fh)
            if fresh:
                writer.writerow(TRIAL_LOG_HEADER)
            for i, (t, (loss, secs)) in enumerate(zip(observed, outcomes)):
                writer.writerow([
                    i,
                    ";".join(str(s) for s in t.layer_ids),
                    repr(float(loss)),
                    f"{secs:.6f}",
                ])
    return observed


def classify(trials: list[MaskTrial], threshold: ThresholdSpec,
             num_layers: int) -> TierAssignment:
    """Fold the observed trials into one tier per layer.

    Pure function of its inputs: losses above baseline+margin vote the
    whole trial Personalized, below baseline-margin vote Generic,
    Personalized wins membership conflicts, everything unvoted is
    Other.  Failed (NaN) trials are skipped; unobserved trials are a
    usage error.  Exact equality with either bound votes nothing.
    """
    personalized: set[int] = set()
    generic: set[int] = set()
    votes: dict[int, list[int]] = {s: [] for s in range(num_layers)}
    for idx, trial in enumerate(trials):
        if trial.observed_loss is None:
            raise UsageError(f"trial {idx} was never observed")
        if trial.failed:
            continue
        bad = [s for s in trial.layer_ids if not 0 <= s < num_layers]
        if bad:
            raise ConfigError(f"trial {idx} names unknown layers {bad}")
        if trial.observed_loss > threshold.upper:
            personalized.update(trial.layer_ids)
        elif trial.observed_loss < threshold.lower:
            generic.update(trial.layer_ids)
        else:
            continue
        for s in trial.layer_ids:
            votes[s].append(idx)
    tiers = {}
    for s in range(num_layers):
        if s in personalized:
            tiers[s] = PERSONALIZED
        elif s in generic:
            tiers[s] = GENERIC
        else:
            tiers[s] = OTHER
    return TierAssignment(tiers=tiers, provenance=votes)


def refine_personalized(model: MiniViT, dataset, assignment: TierAssignment,
                        threshold: ThresholdSpec, budget: int,
                        batch_size: int = 256) -> TierAssignment:
    """Solo re-observation pass over Personalized layers.

    A layer that looked Personalized only because it was co-ablated
    with a truly important one is demoted to Other when its solo
    ablation loss stays within the margin.  Layers are re-checked in
    ascending id order until the extra-observation budget runs out.
    """
    if budget < 0:
        raise ConfigError(f"refine budget must be >= 0, got {budget}")
    tiers = dict(assignment.tiers)
    spent = 0
    for s in assignment.layers_in(PERSONALIZED):
        if spent >= budget:
            break
        spent += 1
        try:
            loss = observe(model, dataset, MaskTrial((s,)), batch_size)
        except NumericError:
            continue  # failed observation: leave the tier alone
        if loss <= threshold.upper:
            tiers[s] = OTHER
    return TierAssignment(
        tiers=tiers,
        provenance={s: list(v) for s, v in assignment.provenance.items()},
    )
