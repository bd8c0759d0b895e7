import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
from conftest import make_refine_data

from povmap.errors import LeakageError
from povmap.features.extract import BASE_COLUMNS, FEATURE_COLUMNS, FeatureTable
from povmap.models.gbt import GbtConfig, GbtModel, predict
from povmap.models.imgcls import CnnSpec, CnnTrainConfig, ConvSpec
from povmap.refine import (
    AuditReport,
    RefineConfig,
    RefineData,
    RefineError,
    RefineEvent,
    RefineState,
    refine,
    run_iteration,
)
from povmap.refine.audit import clusters_by_place
from povmap.refine.events import ClassifierTrained, IterationStarted, NarrowingApplied
from povmap.refine.state import (
    Estimator,
    checkpoint_settings,
    clear_checkpoints,
    latest_iteration,
    read_history,
    state_digest,
)
from povmap.synth import SynthWorld

CONFIG = RefineConfig(
    iterations=4,
    k=3,
    gbt=GbtConfig(n_estimators=15, learning_rate=0.2, max_depth=3),
    cnn_spec=CnnSpec(input_size=16, conv=(ConvSpec(4), ConvSpec(8)), fc=(16,), dropout=0.0),
    cnn_train=CnnTrainConfig(epochs=1, batch_size=16, learning_rate=1e-3),
    regression_patience=10,
)


@pytest.fixture(scope="module")
def data(small_world: SynthWorld) -> RefineData:
    return make_refine_data(small_world)


@pytest.fixture(scope="module")
def refined(data: RefineData) -> tuple[RefineState, list[RefineEvent]]:
    events: list[RefineEvent] = []
    return refine(data, CONFIG, sink=events.append), events


def test_every_iteration_runs_and_audits_clean(
    refined: tuple[RefineState, list[RefineEvent]],
) -> None:
    state, _ = refined
    assert state.iteration == 3
    assert [m.iteration for m in state.history] == [0, 1, 2, 3]
    assert len(state.audits) == 4
    assert all(a.clean for a in state.audits)
    assert state.stopped is None


def test_image_columns_join_from_iteration_two(
    refined: tuple[RefineState, list[RefineEvent]],
) -> None:
    state, events = refined
    started = [e for e in events if isinstance(e, IterationStarted)]
    assert [e.active_columns for e in started] == [len(BASE_COLUMNS)] * 2 + [
        len(FEATURE_COLUMNS)
    ] * 2
    trained = [e for e in events if isinstance(e, ClassifierTrained)]
    assert [(e.iteration, e.warm_started) for e in trained] == [(2, False), (3, True)]
    assert state.cnn is not None
    assert state.thresholds == state.cnn.thresholds
    assert state.cnn_labels
    assert all(len(p) == 4 for p in state.image_probs.values())


def test_narrowing_starts_at_iteration_one(
    refined: tuple[RefineState, list[RefineEvent]], data: RefineData
) -> None:
    state, events = refined
    assert [e.iteration for e in events if isinstance(e, NarrowingApplied)] == [1, 2, 3]
    for cid, cset in state.candidate_sets.items():
        assert cset.candidates == data.candidate_sets[cid].candidates
        if cset.narrowed is not None:
            assert set(cset.narrowed) <= set(cset.candidates)


def test_single_country_predictions_skip_models_that_saw_the_place(
    refined: tuple[RefineState, list[RefineEvent]],
) -> None:
    state, _ = refined
    owners = clusters_by_place(state.candidate_sets)
    train_ids = {run.key: set(run.train_ids) for run in state.runs}
    single = [p for p, e in state.place_estimators.items() if e is Estimator.single]
    for pid in single:
        for key in state.prediction_sources[pid]:
            if key.startswith("single/"):
                assert not train_ids[key] & owners.get(pid, set())


def test_every_place_gets_a_prediction(
    refined: tuple[RefineState, list[RefineEvent]], data: RefineData
) -> None:
    state, _ = refined
    assert set(state.place_predictions) == set(data.features.place_ids)
    assert set(state.history[-1].choices) == set(data.countries())


def test_refinement_is_deterministic(
    refined: tuple[RefineState, list[RefineEvent]], data: RefineData
) -> None:
    state, _ = refined
    again = refine(data, CONFIG)
    assert state_digest(again) == state_digest(state)


def test_without_tiles_image_columns_stay_inactive(small_world: SynthWorld) -> None:
    data = make_refine_data(small_world, with_tiles=False)
    config = RefineConfig(iterations=3, k=3, gbt=GbtConfig(n_estimators=5))
    state = refine(data, config)
    assert [m.active_columns for m in state.history] == [len(BASE_COLUMNS)] * 3
    assert state.cnn is None


def test_checkpoints_and_audit_log(data: RefineData, tmp_path: Path) -> None:
    config = RefineConfig(
        iterations=3,
        k=3,
        gbt=GbtConfig(n_estimators=5),
        cnn_spec=CONFIG.cnn_spec,
        cnn_train=CONFIG.cnn_train,
        regression_patience=10,
    )
    refine(data, config, out_dir=tmp_path)
    assert latest_iteration(tmp_path) == 2
    for k in range(3):
        folder = tmp_path / f"iter_{k}"
        assert (folder / "state.json").is_file()
        assert (folder / "reports" / "cross.json").is_file()
        assert list((folder / "gbt").glob("*.json"))
        predictions = pd.read_csv(folder / "place_predictions.csv")
        assert list(predictions.columns) == ["place_id", "country", "estimator", "iwi_pred"]
        oof = pd.read_csv(folder / "cluster_oof.csv")
        assert len(oof) == len(data.candidate_sets)
    assert not (tmp_path / "iter_1" / "cnn.json").exists()
    assert (tmp_path / "iter_2" / "cnn.json").is_file()
    assert [m.iteration for m in read_history(tmp_path)] == [0, 1, 2]
    assert checkpoint_settings(tmp_path) == {"seed": 0, "k": 3}

    log = (tmp_path / "audit.log").read_text().splitlines()
    assert [json.loads(line)["iteration"] for line in log] == [0, 1, 2]

    # a second run clears checkpoints but keeps appending to the audit log
    (tmp_path / "iter_9").mkdir()
    refine(data, RefineConfig(iterations=1, k=3, gbt=GbtConfig(n_estimators=5)), out_dir=tmp_path)
    assert latest_iteration(tmp_path) == 0
    assert not (tmp_path / "iter_9").exists()
    assert len((tmp_path / "audit.log").read_text().splitlines()) == 4


def test_clear_checkpoints(tmp_path: Path) -> None:
    for name in ("iter_0", "iter_1"):
        (tmp_path / name).mkdir()
    (tmp_path / "keep").mkdir()
    assert clear_checkpoints(tmp_path) == 2
    assert clear_checkpoints(tmp_path) == 0
    assert (tmp_path / "keep").is_dir()


def test_failed_audit_is_logged_then_raised(
    data: RefineData, tmp_path: Path, monkeypatch: pytest.MonkeyPatch
) -> None:
    def dirty_audit(state: RefineState) -> AuditReport:
        return AuditReport(
            iteration=state.iteration,
            violations=("cross/S1: cluster S1-c0000 of held-out country S1 in training rows",),
            checked_runs=1,
            checked_labels=0,
            state_sha256="0" * 64,
        )

    monkeypatch.setattr("povmap.refine.controller.leakage_audit", dirty_audit)
    with pytest.raises(LeakageError, match="S1-c0000"):
        refine(data, RefineConfig(iterations=2, k=3, gbt=GbtConfig(n_estimators=5)), tmp_path)
    entries = (tmp_path / "audit.log").read_text().splitlines()
    assert len(entries) == 1
    assert json.loads(entries[0])["violations"]


def test_regression_stop_ends_the_loop(data: RefineData, monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.setattr(
        "povmap.refine.controller.regression_stop", lambda *args: "headline R2 dropped"
    )
    state = refine(data, RefineConfig(iterations=5, k=3, gbt=GbtConfig(n_estimators=5)))
    assert state.iteration == 0
    assert state.stopped == "headline R2 dropped"


def test_run_iteration_leaves_the_input_state_alone(data: RefineData) -> None:
    start = RefineState(seed=0)
    state = run_iteration(start, data, RefineConfig(k=3, gbt=GbtConfig(n_estimators=5)))
    assert start.iteration == -1
    assert start.history == ()
    assert state.iteration == 0
    assert (start.k, state.k) == (None, 3)


def test_refine_data_validation(data: RefineData) -> None:
    one_country = [c for c in data.clusters if c.country == "S1"]
    with pytest.raises(RefineError, match="2 countries"):
        RefineData(
            clusters=tuple(one_country),
            candidate_sets={c.cluster_id: data.candidate_sets[c.cluster_id] for c in one_country},
            features=data.features,
            place_countries=data.place_countries,
        )
    dropped = next(iter(data.candidate_sets.values())).candidates[0]
    keep = tuple(p for p in data.features.place_ids if p != dropped)
    with pytest.raises(RefineError, match="No features"):
        RefineData(
            clusters=data.clusters,
            candidate_sets=data.candidate_sets,
            features=FeatureTable(place_ids=keep, matrix=data.features.rows(keep)),
            place_countries=data.place_countries,
        )


def test_place_predictions_are_clamped_to_the_iwi_range(
    data: RefineData, monkeypatch: pytest.MonkeyPatch
) -> None:
    def stretched(model: GbtModel, x: np.ndarray) -> np.ndarray:
        return predict(model, x) * 10.0 - 300.0

    monkeypatch.setattr("povmap.refine.controller.predict", stretched)
    config = RefineConfig(k=3, gbt=GbtConfig(n_estimators=5))
    state = run_iteration(RefineState(seed=0), data, config)
    values = np.array(list(state.place_predictions.values()))
    assert values.min() >= 0.0
    assert values.max() <= 100.0
    assert values.min() == 0.0 or values.max() == 100.0
