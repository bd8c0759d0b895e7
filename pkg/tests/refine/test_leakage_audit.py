from dataclasses import replace

import pytest
from conftest import make_refine_data

from povmap.errors import LeakageError
from povmap.models.gbt import GbtConfig
from povmap.refine import RefineConfig, RefineState, leakage_audit, run_iteration
from povmap.refine.audit import clusters_by_place
from povmap.refine.state import state_digest
from povmap.runtime_config import ProtocolChoice
from povmap.synth import SynthWorld

FAST = RefineConfig(iterations=1, k=3, gbt=GbtConfig(n_estimators=10, learning_rate=0.3))


@pytest.fixture(scope="module")
def first_iteration(small_world: SynthWorld) -> RefineState:
    data = make_refine_data(small_world, with_tiles=False)
    return run_iteration(RefineState(seed=0), data, FAST)


def test_clean_iteration_passes(first_iteration: RefineState) -> None:
    report = leakage_audit(first_iteration)
    assert report.clean
    assert report.iteration == 0
    assert report.checked_runs == len(first_iteration.runs)
    assert report.state_sha256 == state_digest(first_iteration)


def test_planted_cross_country_leak(first_iteration: RefineState) -> None:
    before = state_digest(first_iteration)
    cross = next(r for r in first_iteration.runs if r.protocol is ProtocolChoice.cross)
    held_out = next(
        cid for cid, c in first_iteration.cluster_countries.items() if c == cross.label
    )
    leaky = replace(cross, train_ids=cross.train_ids + (held_out,))
    state = replace(
        first_iteration,
        runs=tuple(leaky if r is cross else r for r in first_iteration.runs),
    )
    report = leakage_audit(state)
    assert not report.clean
    assert any(held_out in v and cross.key in v for v in report.violations)
    with pytest.raises(LeakageError) as excinfo:
        leakage_audit(state, raise_on_violation=True)
    assert excinfo.value.report == report
    assert state_digest(first_iteration) == before


def test_planted_test_fold_leak(first_iteration: RefineState) -> None:
    fold = next(r for r in first_iteration.runs if r.protocol is ProtocolChoice.single)
    leaky = replace(fold, train_ids=fold.train_ids + fold.test_ids[:1])
    state = replace(
        first_iteration,
        runs=tuple(leaky if r is fold else r for r in first_iteration.runs),
    )
    violations = leakage_audit(state).violations
    assert violations == (f"{fold.key}: test cluster {fold.test_ids[0]} in training rows",)


def test_search_outside_training_rows(first_iteration: RefineState) -> None:
    fold = next(r for r in first_iteration.runs if r.protocol is ProtocolChoice.pooled)
    leaky = replace(fold, search_ids=fold.train_ids + fold.test_ids[:1])
    state = replace(
        first_iteration,
        runs=tuple(leaky if r is fold else r for r in first_iteration.runs),
    )
    violations = leakage_audit(state).violations
    assert len(violations) == 1
    assert "hyperparameter search" in violations[0]


def test_label_from_a_model_that_saw_the_place(first_iteration: RefineState) -> None:
    owners = clusters_by_place(first_iteration.candidate_sets)
    place, clusters = next((p, c) for p, c in sorted(owners.items()) if c)
    key = first_iteration.runs[0].key
    state = replace(
        first_iteration,
        cnn_labels={place: 1, "orphan": 0},
        label_sources={place: (key,)},
        label_runs={key: tuple(sorted(clusters))},
    )
    violations = leakage_audit(state).violations
    assert "label for orphan has no recorded source model" in violations
    assert f"label for {place} from {key}, which trained on cluster {min(clusters)}" in violations
