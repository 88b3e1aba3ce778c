import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prosub.nas import (
    DROPOUT_CHOICES,
    ArchSpec,
    GreedyTuner,
    NoResultError,
    SearchSpace,
    Trial,
    get_field,
)


def differing_fields(a, b, space):
    return [k for k in space.fields() if get_field(a, k) != get_field(b, k)]


def test_cold_start_default():
    arch = GreedyTuner().propose_next()
    assert arch == ArchSpec(2, 2, (1024, 1024), (1024, 1024), 0.0)
    assert SearchSpace().contains(arch)


def test_hidden_widths_mapping():
    arch = ArchSpec(3, 1, (128, 512), (256, 2048))
    assert arch.hidden_widths("scorer") == [128, 512, 512]
    assert arch.hidden_widths("reconstructor") == [256]


def test_single_trial_no_exploration_mutates_one_field():
    space = SearchSpace(dropout_choices=DROPOUT_CHOICES)
    for seed in range(30):
        tuner = GreedyTuner(space, seed=seed, exploration_prob=0.0)
        first = tuner.propose_next()
        tuner.record_trial(Trial(first, 1, [1.0], [1.0]))
        nxt = tuner.propose_next()
        changed = differing_fields(first, nxt, space)
        assert len(changed) == 1
        choices = space.fields()[changed[0]]
        gap = abs(choices.index(get_field(first, changed[0])) - choices.index(get_field(nxt, changed[0])))
        assert gap == 1


def test_proposals_stay_in_space():
    space = SearchSpace(units=(8, 16), dropout_choices=DROPOUT_CHOICES)
    tuner = GreedyTuner(space, seed=3, start=ArchSpec(1, 1, (8, 8), (8, 8), 0.0))
    rng = np.random.default_rng(0)
    for i in range(100):
        arch = tuner.propose_next()
        assert space.contains(arch)
        tuner.record_trial(Trial(arch, i, [0.0], [float(rng.random())]))


def test_failed_trial_keeps_best():
    tuner = GreedyTuner()
    a = tuner.propose_next()
    tuner.record_trial(Trial(a, 1, [1.0], [0.5]))
    tuner.record_trial(Trial(ArchSpec(1, 1, (128, 128), (128, 128)), 2, status="failed"))
    assert tuner.best == a
    assert tuner.history[-1].objective == math.inf


def test_better_trial_replaces_equal_does_not():
    tuner = GreedyTuner()
    a, b, c = ArchSpec(), ArchSpec(1, 2), ArchSpec(3, 2)
    tuner.record_trial(Trial(a, 1, [], [0.5, 0.4]))
    tuner.record_trial(Trial(b, 2, [], [0.4]))
    assert tuner.best == a
    tuner.record_trial(Trial(c, 3, [], [0.3]))
    assert tuner.best == c


def test_no_ok_trials_raises():
    tuner = GreedyTuner()
    with pytest.raises(NoResultError):
        tuner.best_arch()
    tuner.record_trial(Trial(ArchSpec(), 1, status="failed"))
    with pytest.raises(NoResultError):
        tuner.best_arch()


def test_start_outside_space_rejected():
    with pytest.raises(ValueError):
        GreedyTuner(SearchSpace(units=(8, 16)), start=ArchSpec())


def test_history_json_lines(tmp_path):
    tuner = GreedyTuner()
    tuner.record_trial(Trial(ArchSpec(), 1, [1.0, 0.5], [0.9, 0.7]))
    tuner.record_trial(Trial(ArchSpec(1, 2), 2, status="failed"))
    tuner.write_history(tmp_path / "h.jsonl")
    rows = [json.loads(l) for l in (tmp_path / "h.jsonl").read_text().splitlines()]
    assert rows[0]["objective"] == 0.7 and rows[1]["objective"] is None
    assert ArchSpec.from_dict(rows[0]["arch"]) == ArchSpec()


@settings(max_examples=50, deadline=None)
@given(st.lists(st.one_of(st.floats(0, 10), st.just(math.nan)), min_size=1, max_size=40),
       st.integers(0, 1000))
def test_best_series_non_increasing_and_best_dominates(objectives, seed):
    tuner = GreedyTuner(SearchSpace(units=(8, 16, 32)), seed=seed)
    for i, obj in enumerate(objectives):
        arch = tuner.propose_next()
        status = "failed" if math.isnan(obj) else "ok"
        tuner.record_trial(Trial(arch, i, [obj], [obj] if status == "ok" else [], status))
    series = tuner.best_objective_series()
    assert all(b <= a for a, b in zip(series, series[1:]))
    ok = [t.objective for t in tuner.history if t.status == "ok"]
    if ok:
        assert tuner.best_trial.objective == min(ok)
