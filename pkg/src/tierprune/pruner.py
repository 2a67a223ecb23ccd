"""Tiered iterative magnitude pruning with per-round fine-tuning.

The tier assignment from the probe sets each layer's per-round rate:
generic layers prune at the full rate, personalized layers at half,
undecided layers at the buffered midpoint of those two.  Each round
removes the smallest-scored fraction of the weights a layer still has
(so rates compound across rounds) and then fine-tunes on the user data
with the masks pinned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from decimal import Decimal

import numpy as np

from . import tensor as T
from .errors import ConfigError, NumericError, UsageError
from .model import LinearGroup, MiniViT, accuracy, dataset_loss, forward, train
from .probe import GENERIC, OTHER, PERSONALIZED

WEIGHT = "weight"
GRADIENT = "gradient"

HISTORY_HEADER = ("round", "layer_number", "tier", "step_prob",
                  "pruned_this_round", "cumulative_compression", "loss", "accuracy")


@dataclass(frozen=True)
class PruneSchedule:
    """Knobs for one pruning run; ``prob`` is the global per-round rate."""

    prob: float
    criterion: str = WEIGHT
    rounds: int = 10
    finetune_epochs_per_round: int = 1
    lr: float = 0.05
    prune_personalized: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.prob < 1.0:
            raise ConfigError(f"prob must lie in [0,1), got {self.prob}")
        if self.criterion not in (WEIGHT, GRADIENT):
            raise ConfigError(f"criterion must be {WEIGHT!r} or {GRADIENT!r}, got {self.criterion!r}")
        if self.rounds < 1:
            raise ConfigError(f"rounds must be >= 1, got {self.rounds}")
        if self.finetune_epochs_per_round < 0:
            raise ConfigError(f"finetune_epochs_per_round must be >= 0, got {self.finetune_epochs_per_round}")
        if self.finetune_epochs_per_round > 0 and self.lr <= 0:
            raise ConfigError(f"fine-tuning needs a positive lr, got {self.lr}")


@dataclass
class RoundRecord:
    round_index: int
    pruned: dict[int, int]
    compression: float
    loss: float
    accuracy: float


@dataclass
class PruneHistory:
    """Per-round pruning trace, flattenable to one CSV row per layer."""

    tiers: dict[int, str]
    step_probs: dict[int, float]
    records: list[RoundRecord] = field(default_factory=list)

    def csv_rows(self) -> list[list]:
        rows = [list(HISTORY_HEADER)]
        for rec in self.records:
            for s in sorted(self.tiers):
                rows.append([
                    rec.round_index, s, self.tiers[s], repr(self.step_probs[s]),
                    rec.pruned[s], repr(rec.compression), repr(rec.loss),
                    repr(rec.accuracy),
                ])
        return rows

    def summary(self) -> dict:
        last = self.records[-1] if self.records else None
        return {
            "rounds": len(self.records),
            "tiers": {str(s): t for s, t in sorted(self.tiers.items())},
            "step_probs": {str(s): p for s, p in sorted(self.step_probs.items())},
            "final_compression": last.compression if last else 0.0,
            "final_loss": last.loss if last else None,
            "final_accuracy": last.accuracy if last else None,
            "total_pruned": int(sum(sum(r.pruned.values()) for r in self.records)),
        }


def tier_rate(prob: float, tier: str | None = None, prune_personalized: bool = True):
    """Per-round rate for a tier; with no tier, the (generic,
    personalized, other) triple.

    Generic prunes at ``prob``, personalized at ``prob/2`` (or 0 when
    personalized layers are protected), other at the midpoint
    ``3*prob/4``.  The arithmetic runs in decimal so that decimal rates
    users actually write come out exact: 0.05 gives 0.025 and 0.0375,
    not 0.037500000000000006.
    """
    if not 0.0 <= prob < 1.0:
        raise ConfigError(f"prob must lie in [0,1), got {prob}")
    d = Decimal(str(prob))
    generic = float(d)
    personalized = float(d / 2) if prune_personalized else 0.0
    other = float(3 * d / 4)
    if tier is None:
        return (generic, personalized, other)
    table = {GENERIC: generic, PERSONALIZED: personalized, OTHER: other}
    if tier not in table:
        raise ConfigError(f"unknown tier {tier!r}")
    return table[tier]


def _dataset_weight_gradients(model: MiniViT, dataset, batch_size: int = 256) -> dict[int, np.ndarray]:
    """Dataset-averaged loss gradient for every group weight.

    One deterministic full pass: batch gradients are combined with
    example-count weights in float64, so the result is the gradient of
    the mean loss over the whole dataset.
    """
    n = dataset.num_examples
    if n == 0:
        raise UsageError("gradient scoring needs a nonempty dataset")
    groups = model.linear_groups()
    params = model.parameters()
    sums = {g.layer_number: np.zeros(g.weight.shape, dtype=np.float64) for g in groups}
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(start + batch_size, n))
        logits = forward(model, T.Tensor(dataset.images.values[idx]))
        loss = T.cross_entropy(logits, dataset.labels[idx])
        T.backward(loss)
        for g in groups:
            if g.weight.grad is not None:
                sums[g.layer_number] += g.weight.grad.astype(np.float64) * len(idx)
        T.zero_grads(params)
    for s, acc in sums.items():
        acc /= n
        if not np.isfinite(acc).all():
            raise NumericError(f"non-finite gradient for layer {s}")
    return sums


def score_weights(layer: LinearGroup, criterion: str, model: MiniViT | None = None,
                  dataset=None, batch_size: int = 256) -> np.ndarray:
    """Importance score per kept weight entry; pruned entries are +inf.

    Weight criterion scores by magnitude.  Gradient criterion scores by
    the magnitude of the dataset-averaged loss gradient and needs the
    owning model plus a dataset.
    """
    if criterion == WEIGHT:
        scores = np.abs(layer.weight.values).astype(np.float64)
    elif criterion == GRADIENT:
        if model is None or dataset is None:
            raise UsageError("gradient criterion needs model and dataset")
        grads = _dataset_weight_gradients(model, dataset, batch_size)
        scores = np.abs(grads[layer.layer_number])
    else:
        raise ConfigError(f"unknown criterion {criterion!r}")
    scores[~layer.mask] = np.inf
    return scores


def _prune_layer(layer: LinearGroup, scores: np.ndarray, rate: float) -> int:
    kept = int(layer.mask.sum())
    count = math.floor(rate * kept)
    if count <= 0:
        return 0
    flat = scores.reshape(-1)
    order = np.argsort(flat, kind="stable")  # ties resolve to lower flat index
    chosen = order[:count]
    mask_flat = layer.mask.reshape(-1)
    mask_flat[chosen] = False
    layer.apply_mask()
    return count


def prune_step(model: MiniViT, tiers: dict[int, str], schedule: PruneSchedule,
               dataset=None, batch_size: int = 256) -> dict[int, int]:
    """One pruning round: drop the lowest-scored fraction per layer.

    Each layer loses floor(step_prob * kept) weights, scored under the
    schedule's criterion (the gradient criterion reads ``dataset``).
    Returns pruned counts keyed by layer number.
    """
    groups = model.linear_groups()
    missing = [g.layer_number for g in groups if g.layer_number not in tiers]
    if missing:
        raise UsageError(f"tiers missing for layers {missing}")
    grad_scores = None
    if schedule.criterion == GRADIENT:
        if dataset is None:
            raise UsageError("gradient criterion needs a dataset")
        grad_scores = _dataset_weight_gradients(model, dataset, batch_size)
    pruned = {}
    for g in groups:
        rate = tier_rate(schedule.prob, tiers[g.layer_number], schedule.prune_personalized)
        if grad_scores is not None:
            scores = np.abs(grad_scores[g.layer_number])
            scores[~g.mask] = np.inf
        else:
            scores = score_weights(g, WEIGHT)
        pruned[g.layer_number] = _prune_layer(g, scores, rate)
    return pruned


def compression(model: MiniViT) -> float:
    """Zeroed fraction of prunable weights (group weights only)."""
    kept = sum(g.kept_count for g in model.linear_groups())
    total = sum(g.weight.numel for g in model.linear_groups())
    return (total - kept) / total


def _round_seed(base_seed: int, round_index: int) -> int:
    state = np.random.SeedSequence(entropy=(base_seed, round_index)).generate_state(1)
    return int(state[0])


def iterative_prune(model: MiniViT, dataset_user, tiers: dict[int, str],
                    schedule: PruneSchedule, eval_dataset=None,
                    batch_size: int = 32) -> PruneHistory:
    """Alternate prune and fine-tune rounds; record the trace.

    Fine-tuning runs on the user dataset with a per-round derived seed;
    the recorded loss/accuracy come from ``eval_dataset`` when given,
    otherwise from the user data itself.
    """
    step_probs = {
        s: tier_rate(schedule.prob, t, schedule.prune_personalized)
        for s, t in tiers.items()
    }
    history = PruneHistory(tiers=dict(tiers), step_probs=step_probs)
    measure_on = eval_dataset if eval_dataset is not None else dataset_user
    for r in range(schedule.rounds):
        pruned = prune_step(model, tiers, schedule, dataset_user)
        if schedule.finetune_epochs_per_round > 0:
            train(model, dataset_user, epochs=schedule.finetune_epochs_per_round,
                  lr=schedule.lr, batch_size=batch_size,
                  seed=_round_seed(schedule.seed, r))
        history.records.append(RoundRecord(
            round_index=r,
            pruned=pruned,
            compression=compression(model),
            loss=dataset_loss(model, measure_on),
            accuracy=accuracy(model, measure_on),
        ))
    return history


def predicted_compression(tiers: dict[int, str], sizes: dict[int, int],
                          prob: float, rounds: int,
                          prune_personalized: bool = True) -> float:
    """Closed-form compounding prediction, ignoring per-round flooring.

    A layer at rate r keeps (1-r)^rounds of its weights, so overall
    compression is the size-weighted mean of 1-(1-r)^rounds.  Actual
    runs land within layer-count * rounds / total-size of this value.
    """
    total = sum(sizes.values())
    removed = 0.0
    for s, t in tiers.items():
        rate = tier_rate(prob, t, prune_personalized)
        removed += sizes[s] * (1.0 - (1.0 - rate) ** rounds)
    return removed / total
