import pytest
from rich.console import Console

import povmap.console.rendering as rendering
from povmap.refine.events import (
    ClassifierTrained,
    EstimatorChosen,
    IterationFinished,
    IterationStarted,
    NarrowingApplied,
    ProtocolScored,
    RefineStopped,
)
from povmap.refine.state import AuditReport, Estimator, IterationMetrics
from povmap.validate import MetricVariant, UnitScore, ValidationReport


@pytest.fixture
def recorded(monkeypatch: pytest.MonkeyPatch) -> Console:
    console = Console(record=True, width=120, color_system=None)
    monkeypatch.setattr(rendering, "console", console)
    return console


def test_render_events(recorded: Console) -> None:
    rendering.render_event(IterationStarted(iteration=2, active_columns=64, training_clusters=30))
    rendering.render_event(
        ProtocolScored(iteration=2, protocol="cross", mean=0.61, units={"AA": 0.5, "BB": 0.72})
    )
    rendering.render_event(
        EstimatorChosen(iteration=2, country="AA", estimator="single", single=0.7, cross=None)
    )
    rendering.render_event(
        ClassifierTrained(iteration=2, tiles=40, warm_started=True, final_loss=1.25)
    )
    rendering.render_event(NarrowingApplied(iteration=2, narrowed=7, skipped=3))
    rendering.render_event(IterationFinished(iteration=2, headline=None, violations=0))
    rendering.render_event(RefineStopped(iteration=2, reason="too many drops"))
    text = recorded.export_text()
    assert "Iteration 2" in text
    assert "30 clusters, 64 feature columns" in text
    assert "cross: 0.6100" in text
    assert "BB 0.7200" in text
    assert "AA: single (single 0.7000, cross n/a)" in text
    assert "warm-started on 40 tiles, loss 1.2500" in text
    assert "narrowed 7 clusters, 3 skipped" in text
    assert "iteration 2 R² n/a" in text
    assert "Stopped after iteration 2: too many drops" in text


def test_render_history(recorded: Console) -> None:
    metrics = IterationMetrics(
        iteration=0,
        single={"AA": 0.4},
        cross={"AA": 0.5},
        pooled=None,
        choices={"AA": Estimator.cross},
        active_columns=60,
        training_clusters=12,
        pooled_ran=False,
    )
    rendering.render_history([metrics])
    text = recorded.export_text()
    assert "Refinement history" in text
    assert "0.4000" in text
    assert "0.5000" in text
    assert "n/a" in text


def test_render_report_lists_excluded_units(recorded: Console) -> None:
    report = ValidationReport(
        protocol="loco",
        variant=MetricVariant.pearson2,
        units={"AA": UnitScore(pearson2=0.81, ssres=0.8, n=10)},
        folds={},
        predictions={},
        excluded={"CC": "1 cluster(s)"},
    )
    rendering.render_report(report)
    text = recorded.export_text()
    assert "loco (pearson2)" in text
    assert "0.8100" in text
    assert "1 cluster(s)" in text


def test_render_audit(recorded: Console) -> None:
    clean = AuditReport(
        iteration=1, violations=(), checked_runs=4, checked_labels=0, state_sha256="x"
    )
    dirty = AuditReport(
        iteration=1,
        violations=("cross/AA: cluster a1 of held-out country AA in training rows",),
        checked_runs=4,
        checked_labels=0,
        state_sha256="x",
    )
    rendering.render_audit(clean)
    rendering.render_audit(dirty)
    text = recorded.export_text()
    assert "Leakage audit clean (4 models, 0 labels)" in text
    assert "Leakage audit: 1 violation(s)" in text
    assert "cluster a1 of held-out country AA" in text


def test_render_error(recorded: Console) -> None:
    rendering.render_error("countries.KE.population: not set")
    lines = [line.rstrip() for line in recorded.export_text().splitlines()]
    assert lines[0] == "Error"
    assert lines[1] == "  countries.KE.population: not set"
