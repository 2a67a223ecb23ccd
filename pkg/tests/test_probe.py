"""Ablation probing and tier classification tests."""

import csv
import hashlib
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tierprune import probe as P
from tierprune.data import synth_dataset
from tierprune.errors import ConfigError, DataError, NumericError, UsageError
from tierprune.model import ViTConfig, build_model, dataset_loss, train
from tierprune.probe import (
    GENERIC,
    OTHER,
    PERSONALIZED,
    MaskTrial,
    ThresholdSpec,
    baseline_loss,
    classify,
    observe,
    observe_trials,
    refine_personalized,
    sample_trials,
)

CFG = ViTConfig(image_size=32, patch_size=8, embed_dim=32, num_heads=2,
                depth=2, mlp_ratio=2, num_classes=6, seed=0)


@pytest.fixture(scope="module")
def ds():
    return synth_dataset(num_classes=6, per_class=16, seed=3)


@pytest.fixture(scope="module")
def trained(ds):
    m = build_model(CFG)
    train(m, ds, epochs=8, lr=0.15, batch_size=16, seed=1)
    return m


def state_digest(model):
    h = hashlib.sha256()
    for _, p in model.named_parameters():
        h.update(p.values.tobytes())
    for g in model.linear_groups():
        h.update(g.mask.tobytes())
        h.update(bytes([g.is_skip]))
    return h.hexdigest()


# ---------------------------------------------------------------- baseline


def test_baseline_equals_dataset_loss(trained, ds):
    thr = baseline_loss(trained, ds)
    assert thr.baseline_loss == dataset_loss(trained, ds)
    assert thr.margin == pytest.approx(0.02 * thr.baseline_loss)


def test_baseline_deterministic(trained, ds):
    assert baseline_loss(trained, ds) == baseline_loss(trained, ds)


def test_baseline_rejects_active_ablation(trained, ds):
    trained.linear_groups()[0].is_skip = True
    try:
        with pytest.raises(UsageError):
            baseline_loss(trained, ds)
    finally:
        trained.linear_groups()[0].is_skip = False


def test_baseline_restore_fidelity(trained, ds):
    before = baseline_loss(trained, ds)
    g = trained.linear_groups()[3]
    g.is_skip = True
    g.is_skip = False
    assert baseline_loss(trained, ds) == before
    observe(trained, ds, MaskTrial((1, 4)))
    assert baseline_loss(trained, ds) == before


# ---------------------------------------------------------------- sampling


def test_sample_full_width_trials():
    trials = sample_trials(num_layers=8, random_number=8, num_trials=4, seed=0)
    assert all(t.layer_ids == tuple(range(8)) for t in trials)


def test_sample_exhaustive_single_coverage():
    trials = sample_trials(num_layers=8, random_number=1, seed=5, exhaustive=True)
    seen = [t.layer_ids[0] for t in trials]
    assert sorted(seen) == list(range(8))
    assert len(trials) == 8


def test_sample_exhaustive_chunks_partition():
    trials = sample_trials(num_layers=8, random_number=4, seed=2, exhaustive=True)
    assert len(trials) == 2
    assert sorted(sum((t.layer_ids for t in trials), ())) == list(range(8))


def test_sample_exhaustive_requires_divisibility():
    with pytest.raises(ConfigError):
        sample_trials(num_layers=8, random_number=3, exhaustive=True)


def test_sample_deterministic():
    a = sample_trials(16, 4, seed=9)
    b = sample_trials(16, 4, seed=9)
    assert a == b
    assert a != sample_trials(16, 4, seed=10)


def test_sample_default_count():
    assert len(sample_trials(16, 4, seed=0)) == 12  # 3 * ceil(16/4)
    assert len(sample_trials(16, 5, seed=0)) == 12  # 3 * ceil(16/5)


def test_sample_rejects_bad_k():
    with pytest.raises(ConfigError):
        sample_trials(8, 9)
    with pytest.raises(ConfigError):
        sample_trials(8, 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 99))
def test_sample_trials_are_valid_subsets(num_layers, k, seed):
    if k > num_layers:
        with pytest.raises(ConfigError):
            sample_trials(num_layers, k, seed=seed)
        return
    for t in sample_trials(num_layers, k, num_trials=5, seed=seed):
        assert len(t.layer_ids) == k
        assert len(set(t.layer_ids)) == k
        assert all(0 <= s < num_layers for s in t.layer_ids)


def test_trial_rejects_duplicates():
    with pytest.raises(ConfigError):
        MaskTrial((1, 1, 2))


# ---------------------------------------------------------------- observe


def test_observe_empty_trial_equals_baseline(trained, ds):
    thr = baseline_loss(trained, ds)
    assert observe(trained, ds, MaskTrial(())) == thr.baseline_loss


def test_observe_all_layers_finite(trained, ds):
    loss = observe(trained, ds, MaskTrial(tuple(range(8))))
    assert math.isfinite(loss)


def test_observe_matches_manual_zeroing(trained, ds):
    loss = observe(trained, ds, MaskTrial((5,)))
    clone = trained.clone()
    g = clone.linear_groups()[5]
    g.weight.values[...] = 0.0
    g.bias.values[...] = 0.0
    assert loss == dataset_loss(clone, ds)


def test_observe_never_mutates_state(trained, ds):
    before = state_digest(trained)
    observe(trained, ds, MaskTrial((0, 2, 7)))
    assert state_digest(trained) == before


def test_observe_restores_flags_on_error(trained, ds):
    empty = ds.take(np.array([], dtype=np.int64))
    with pytest.raises(DataError):
        observe(trained, empty, MaskTrial((1,)))
    assert not any(g.is_skip for g in trained.linear_groups())


def test_observe_rejects_unknown_layers(trained, ds):
    with pytest.raises(ConfigError):
        observe(trained, ds, MaskTrial((99,)))


# ---------------------------------------------------------------- classify


def test_classify_high_trial_votes_personalized():
    thr = ThresholdSpec(1.0, 0.1)
    out = classify([MaskTrial((3, 7), observed_loss=1.5)], thr, num_layers=8)
    assert out.tiers[3] == PERSONALIZED and out.tiers[7] == PERSONALIZED
    assert out.provenance[3] == [0] and out.provenance[7] == [0]
    assert all(out.tiers[s] == OTHER for s in (0, 1, 2, 4, 5, 6))


def test_classify_personalized_wins_conflicts():
    thr = ThresholdSpec(1.0, 0.1)
    trials = [
        MaskTrial((5, 1), observed_loss=2.0),   # votes personalized
        MaskTrial((5, 2), observed_loss=0.2),   # votes generic
    ]
    out = classify(trials, thr, num_layers=6)
    assert out.tiers[5] == PERSONALIZED
    assert out.tiers[1] == PERSONALIZED
    assert out.tiers[2] == GENERIC
    assert out.provenance[5] == [0, 1]


def test_classify_zero_trials_all_other():
    out = classify([], ThresholdSpec(1.0, 0.0), num_layers=4)
    assert all(t == OTHER for t in out.tiers.values())
    assert all(v == [] for v in out.provenance.values())


def test_classify_boundary_equality_votes_nothing():
    thr = ThresholdSpec(1.0, 0.1)
    trials = [
        MaskTrial((0,), observed_loss=1.1),  # == upper, strict rule
        MaskTrial((1,), observed_loss=0.9),  # == lower
    ]
    out = classify(trials, thr, num_layers=2)
    assert out.tiers == {0: OTHER, 1: OTHER}


def test_classify_unobserved_trial_rejected():
    with pytest.raises(UsageError):
        classify([MaskTrial((0,))], ThresholdSpec(1.0, 0.0), num_layers=2)


def test_classify_failed_trial_skipped():
    thr = ThresholdSpec(1.0, 0.1)
    trials = [
        MaskTrial((0,), observed_loss=float("nan")),
        MaskTrial((1,), observed_loss=2.0),
    ]
    out = classify(trials, thr, num_layers=2)
    assert out.tiers == {0: OTHER, 1: PERSONALIZED}


def test_classify_permutation_invariant():
    rng = np.random.default_rng(0)
    thr = ThresholdSpec(1.0, 0.05)
    trials = [
        MaskTrial(tuple(rng.choice(10, 3, replace=False).tolist()),
                  observed_loss=float(rng.uniform(0.5, 1.5)))
        for _ in range(20)
    ]
    base = classify(trials, thr, num_layers=10)
    perm = rng.permutation(len(trials))
    shuffled = classify([trials[i] for i in perm], thr, num_layers=10)
    assert shuffled.tiers == base.tiers
    # provenance identifies the same trials through the permutation
    for s in range(10):
        assert sorted(int(perm[j]) for j in shuffled.provenance[s]) == sorted(base.provenance[s])


def _vote_sets(trials, thr):
    # independent restatement of the voting rule, no conflict resolution
    p_set, g_set = set(), set()
    for t in trials:
        if t.observed_loss > thr.upper:
            p_set.update(t.layer_ids)
        elif t.observed_loss < thr.lower:
            g_set.update(t.layer_ids)
    return p_set, g_set


@settings(max_examples=40, deadline=None)
@given(
    st.lists(
        st.tuples(st.sets(st.integers(0, 7), min_size=1, max_size=4),
                  st.floats(0.0, 2.0)),
        max_size=12,
    ),
    st.floats(0.0, 0.5),
    st.floats(0.0, 0.5),
)
def test_margin_growth_never_grows_vote_sets(raw, m1, extra):
    trials = [MaskTrial(tuple(ids), observed_loss=loss) for ids, loss in raw]
    narrow_thr, wide_thr = ThresholdSpec(1.0, m1), ThresholdSpec(1.0, m1 + extra)
    np_set, ng_set = _vote_sets(trials, narrow_thr)
    wp_set, wg_set = _vote_sets(trials, wide_thr)
    assert wp_set <= np_set
    assert wg_set <= ng_set
    # classify resolves conflicts on exactly these vote sets
    for thr, p_set, g_set in ((narrow_thr, np_set, ng_set), (wide_thr, wp_set, wg_set)):
        out = classify(trials, thr, num_layers=8)
        assert set(out.layers_in(PERSONALIZED)) == p_set
        assert set(out.layers_in(GENERIC)) == g_set - p_set


@pytest.mark.parametrize("model_kind", ["trained", "untrained"])
def test_exhaustive_matches_brute_force(model_kind, trained, ds):
    model = trained if model_kind == "trained" else build_model(CFG)
    thr = baseline_loss(model, ds, margin=0.0)
    trials = observe_trials(
        model, ds, sample_trials(8, 1, seed=0, exhaustive=True)
    )
    out = classify(trials, thr, num_layers=8)

    expect_p, expect_g = set(), set()
    for s in range(8):
        solo = observe(model, ds, MaskTrial((s,)))
        if solo > thr.baseline_loss:
            expect_p.add(s)
        elif solo < thr.baseline_loss:
            expect_g.add(s)
    assert set(out.layers_in(PERSONALIZED)) == expect_p
    assert set(out.layers_in(GENERIC)) == expect_g


# ---------------------------------------------------------------- refine


def test_refine_zero_budget_unchanged(trained, ds):
    thr = baseline_loss(trained, ds)
    trials = observe_trials(trained, ds, sample_trials(8, 4, seed=0))
    out = classify(trials, thr, num_layers=8)
    refined = refine_personalized(trained, ds, out, thr, budget=0)
    assert refined.tiers == out.tiers
    assert refined.provenance == out.provenance


def test_refine_negative_budget_rejected(trained, ds):
    out = classify([], ThresholdSpec(1.0, 0.0), num_layers=8)
    with pytest.raises(ConfigError):
        refine_personalized(trained, ds, out, ThresholdSpec(1.0, 0.0), budget=-1)


def test_refine_demotes_co_ablated_passenger(trained, ds):
    # planted scenario: layer 1 dominates, layer 4 is mild; a margin
    # between their solo deltas makes 4 a passenger in the joint trial
    base = baseline_loss(trained, ds, margin=0.0).baseline_loss
    solo1 = observe(trained, ds, MaskTrial((1,)))
    solo4 = observe(trained, ds, MaskTrial((4,)))
    thr = ThresholdSpec(base, margin=0.5)
    assert solo1 > thr.upper and solo4 <= thr.upper  # fixture sanity

    joint = observe(trained, ds, MaskTrial((1, 4)))
    assert joint > thr.upper
    out = classify([MaskTrial((1, 4), observed_loss=joint)], thr, num_layers=8)
    assert out.tiers[1] == PERSONALIZED and out.tiers[4] == PERSONALIZED

    refined = refine_personalized(trained, ds, out, thr, budget=8)
    assert refined.tiers[1] == PERSONALIZED
    assert refined.tiers[4] == OTHER


def test_refine_idempotent(trained, ds):
    thr = baseline_loss(trained, ds)
    trials = observe_trials(trained, ds, sample_trials(8, 4, seed=1))
    out = classify(trials, thr, num_layers=8)
    once = refine_personalized(trained, ds, out, thr, budget=16)
    twice = refine_personalized(trained, ds, once, thr, budget=16)
    assert twice.tiers == once.tiers


# ---------------------------------------------------------------- observe_trials


def test_observe_trials_fills_in_order(trained, ds):
    trials = sample_trials(8, 2, num_trials=5, seed=4)
    observed = observe_trials(trained, ds, trials)
    assert [t.layer_ids for t in observed] == [t.layer_ids for t in trials]
    for t in observed:
        assert t.observed_loss == observe(trained, ds, MaskTrial(t.layer_ids))


def test_observe_trials_parallel_matches_sequential(trained, ds):
    trials = sample_trials(8, 2, num_trials=6, seed=5)
    seq = observe_trials(trained, ds, trials, threads=1)
    par = observe_trials(trained, ds, trials, threads=3)
    assert [t.observed_loss for t in par] == [t.observed_loss for t in seq]


def test_observe_trials_env_cap(monkeypatch):
    monkeypatch.setenv("TIERPRUNE_THREADS", "3")
    assert P._thread_count(None, 10) == 3
    assert P._thread_count(None, 2) == 2
    assert P._thread_count(5, 10) == 5  # explicit arg wins
    monkeypatch.setenv("TIERPRUNE_THREADS", "0")
    with pytest.raises(ConfigError):
        P._thread_count(None, 10)


def test_observe_trials_writes_log(trained, ds, tmp_path):
    log = tmp_path / "trials.csv"
    trials = sample_trials(8, 2, num_trials=4, seed=6)
    observed = observe_trials(trained, ds, trials, log_path=log)
    with open(log, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == list(P.TRIAL_LOG_HEADER)
    assert len(rows) == 5
    for i, row in enumerate(rows[1:]):
        assert int(row[0]) == i
        ids = tuple(int(x) for x in row[1].split(";"))
        assert ids == observed[i].layer_ids
        assert float(row[2]) == observed[i].observed_loss
        assert float(row[3]) >= 0.0


def test_observe_trials_records_failures(trained, ds, monkeypatch):
    real = P.observe

    def flaky(model, dataset, trial, batch_size=256):
        if 0 in trial.layer_ids:
            raise NumericError("forced failure")
        return real(model, dataset, trial, batch_size)

    monkeypatch.setattr(P, "observe", flaky)
    trials = [MaskTrial((0, 1)), MaskTrial((2, 3))]
    observed = observe_trials(trained, ds, trials)
    assert observed[0].failed
    assert not observed[1].failed
    out = classify(observed, ThresholdSpec(1.0, 0.0), num_layers=8)
    assert out.tiers[0] == OTHER and out.tiers[1] == OTHER
