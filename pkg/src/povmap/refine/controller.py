"""
Co-training refinement controller.

Iteration 0 trains the feature model on clusters averaged over their radius
candidates. Iteration 1 narrows every cluster's candidates with the previous
iteration's place predictions and retrains. From iteration 2 on, the places are
labeled with the previous predictions, an image classifier is trained (then
warm-started) on those labels, its class probabilities become four extra
feature columns, and narrowing plus retraining follow as before.
"""

import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Optional

import numpy as np
import numpy.typing as npt

from povmap.clusters import (
    CandidateSet,
    SurveyCluster,
    TrainingRows,
    narrow,
    training_rows,
)
from povmap.errors import DataError, LeakageError
from povmap.features.extract import BASE_COLUMNS, FEATURE_COLUMNS, FeatureTable
from povmap.iwi import IWI_MAX, IWI_MIN
from povmap.models.gbt import GbtConfig, GbtModel, SearchSpace, hyper_search, predict
from povmap.models.gbt import train as train_gbt
from povmap.models.imgcls import (
    CnnModel,
    CnnSpec,
    CnnTrainConfig,
    Tile,
    check_compatible,
    init_model,
    make_labels,
    predict_proba,
    train_cls,
    warm_start,
    warm_start_config,
)
from povmap.refine.audit import clusters_by_place, leakage_audit
from povmap.refine.events import (
    ClassifierTrained,
    EstimatorChosen,
    EventSink,
    IterationFinished,
    IterationStarted,
    NarrowingApplied,
    ProtocolScored,
    RefineStopped,
    ignore_event,
)
from povmap.refine.state import (
    Estimator,
    FoldRun,
    IterationMetrics,
    RefineState,
    append_audit_log,
    clear_checkpoints,
    save_checkpoint,
)
from povmap.runtime_config import ProtocolChoice
from povmap.validate import (
    DEFAULT_K,
    MetricVariant,
    ValidationReport,
    kfold,
    leave_one_country_out,
    pooled_eval,
)

logger = logging.getLogger(__name__)

FloatArray = npt.NDArray[np.float64]

IMAGE_ITERATION = 2
NARROWING_ITERATION = 1
REGRESSION_TOLERANCE = 0.02
REGRESSION_PATIENCE = 2
AUDIT_LOG = "audit.log"
REFINE_SECTION_KEYS: tuple[str, ...] = (
    "resample",
    "regression_tolerance",
    "regression_patience",
)


class RefineError(DataError):
    pass


class SelectionError(RefineError):
    """Raised when an estimator choice lacks one of its validation scores."""

    pass


def derive_seed(*parts: int) -> int:
    """Deterministic 32-bit seed from a path of integers."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


@dataclass(frozen=True)
class RefineConfig:
    """
    Refinement settings.

    ``overrides`` is indexed by iteration; each entry may carry ``gbt`` and
    ``cnn_train`` objects whose keys replace the base configs for that iteration.
    """

    iterations: int = 7
    k: int = DEFAULT_K
    seed: int = 0
    metric: MetricVariant = MetricVariant.pearson2
    protocols: tuple[ProtocolChoice, ...] = tuple(ProtocolChoice)
    gbt: GbtConfig = GbtConfig()
    search_space: SearchSpace = SearchSpace()
    search_budget: int = 0
    cnn_spec: CnnSpec = CnnSpec()
    cnn_train: CnnTrainConfig = CnnTrainConfig()
    resample: bool = True
    regression_tolerance: float = REGRESSION_TOLERANCE
    regression_patience: int = REGRESSION_PATIENCE
    overrides: tuple[Mapping[str, Any], ...] = ()

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise RefineError(f"iterations must be >= 1, got {self.iterations}")
        if self.k < 2:
            raise RefineError(f"k must be >= 2, got {self.k}")
        if not {ProtocolChoice.single, ProtocolChoice.cross} & set(self.protocols):
            raise RefineError("At least one of the single and cross protocols must run")
        for i, override in enumerate(self.overrides):
            unknown = sorted(set(override) - {"gbt", "cnn_train"})
            if unknown:
                raise RefineError(f"overrides[{i}]: unknown keys {', '.join(unknown)}")

    def gbt_for(self, iteration: int) -> GbtConfig:
        override = self.overrides[iteration] if iteration < len(self.overrides) else {}
        return GbtConfig.from_dict({**self.gbt.to_dict(), **override.get("gbt", {})})

    def cnn_train_for(self, iteration: int, warm: bool) -> CnnTrainConfig:
        base = warm_start_config(self.cnn_train) if warm else self.cnn_train
        override = self.overrides[iteration] if iteration < len(self.overrides) else {}
        return replace(base, **override.get("cnn_train", {}))

    @classmethod
    def from_sections(
        cls,
        *,
        iterations: int,
        k: int,
        seed: int,
        metric: MetricVariant,
        protocols: Sequence[ProtocolChoice],
        gbt: Mapping[str, Any],
        search: Mapping[str, Any],
        cnn: Mapping[str, Any],
        refine: Mapping[str, Any],
        overrides: Sequence[Mapping[str, Any]],
    ) -> "RefineConfig":
        """Build from manifest sections."""
        extra = {k: v for k, v in refine.items() if k in REFINE_SECTION_KEYS}
        unknown = sorted(set(refine) - set(REFINE_SECTION_KEYS))
        if unknown:
            raise RefineError(f"Unknown refine keys: {', '.join(unknown)}")
        search_bounds = {k: tuple(v) for k, v in search.items() if k != "budget"}
        return cls(
            iterations=iterations,
            k=k,
            seed=seed,
            metric=metric,
            protocols=tuple(protocols),
            gbt=GbtConfig.from_dict(dict(gbt)),
            search_space=SearchSpace(**search_bounds),  # type: ignore[arg-type]
            search_budget=int(search.get("budget", 0)),
            cnn_spec=CnnSpec.from_dict(cnn.get("spec", {})) if cnn.get("spec") else CnnSpec(),
            cnn_train=CnnTrainConfig.from_dict(cnn.get("train", {})),
            overrides=tuple(overrides),
            **extra,
        )


@dataclass(frozen=True, eq=False)
class RefineData:
    """
    Inputs of a refinement run.

    ``candidate_sets`` are the radius (or quadrant fallback) sets; ``features``
    must hold a row for every candidate place; ``place_countries`` maps every
    featured place to its country.
    """

    clusters: tuple[SurveyCluster, ...]
    candidate_sets: Mapping[str, CandidateSet]
    features: FeatureTable
    place_countries: Mapping[str, str]
    tiles: Mapping[str, Tile] = field(default_factory=dict)

    def __post_init__(self) -> None:
        lookup = self.features.index()
        missing = sorted(
            {pid for s in self.candidate_sets.values() for pid in s.candidates} - set(lookup)
        )
        if missing:
            raise RefineError(f"No features for candidate places: {', '.join(missing[:5])}")
        unplaced = sorted(set(lookup) - set(self.place_countries))
        if unplaced:
            raise RefineError(f"No country for places: {', '.join(unplaced[:5])}")
        countries = {c.country for c in self.clusters if c.cluster_id in self.candidate_sets}
        if len(countries) < 2:
            raise RefineError(
                f"Refinement needs clusters from >= 2 countries, got {len(countries)}"
            )

    def countries(self) -> list[str]:
        return sorted(set(self.place_countries.values()))

    def places_of(self, country: str) -> list[str]:
        return [pid for pid in self.features.place_ids if self.place_countries[pid] == country]


@dataclass
class _Context:
    """Per-iteration model fitting with the bookkeeping the audit needs."""

    iteration: int
    seed: int
    config: RefineConfig
    gbt: GbtConfig
    place_x: FloatArray
    place_index: Mapping[str, int]
    candidate_sets: Mapping[str, CandidateSet]
    calls: int = 0

    def fit(
        self,
        protocol: ProtocolChoice,
        label: str,
        train: TrainingRows,
        test_ids: Sequence[str],
    ) -> FoldRun:
        self.calls += 1
        call_seed = derive_seed(self.seed, self.calls)
        config = replace(self.gbt, seed=call_seed)
        search_ids: tuple[str, ...] = ()
        if self.config.search_budget > 0 and len(train) >= 3:
            result = hyper_search(
                train, self.config.search_space, self.config.search_budget, call_seed, config
            )
            config, search_ids = result.best, result.row_ids
        rows = train
        if self.config.resample and len(train) > 1:
            draw = np.random.default_rng(call_seed).integers(0, len(train), size=len(train))
            rows = train.take(np.sort(draw))
        model = train_gbt(rows, config=config)
        return FoldRun(
            protocol=protocol,
            label=label,
            train_ids=tuple(sorted(set(train.cluster_ids))),
            test_ids=tuple(test_ids),
            model=model,
            search_ids=tuple(sorted(set(search_ids))),
        )

    def place_predictions(self, model: GbtModel, place_ids: Sequence[str]) -> FloatArray:
        if not place_ids:
            return np.zeros(0)
        # the model is unbounded; IWI is clamped where its output enters the pipeline
        raw = predict(model, self.place_x[[self.place_index[p] for p in place_ids]])
        return np.clip(raw, IWI_MIN, IWI_MAX)

    def cluster_predictions(self, model: GbtModel, cluster_ids: Sequence[str]) -> FloatArray:
        """Mean place prediction over each cluster's full candidate set."""
        out = []
        for cid in cluster_ids:
            values = self.place_predictions(model, self.candidate_sets[cid].candidates)
            out.append(math.fsum(values.tolist()) / len(values))
        return np.array(out, dtype=np.float64)


class _FoldTrainer:
    """Trainer callable for the validation protocols; keeps every fitted run."""

    def __init__(self, ctx: _Context, protocol: ProtocolChoice, scope: str = "") -> None:
        self.ctx = ctx
        self.protocol = protocol
        self.scope = scope
        self.runs: list[FoldRun] = []

    def __call__(self, train: TrainingRows, test: TrainingRows) -> FloatArray:
        if self.protocol is ProtocolChoice.cross:
            label = test.countries[0]
        else:
            prefix = f"{self.scope}/" if self.scope else ""
            label = f"{prefix}f{len(self.runs)}"
        run = self.ctx.fit(self.protocol, label, train, test.cluster_ids)
        self.runs.append(run)
        return self.ctx.cluster_predictions(run.model, test.cluster_ids)


def select_estimator(
    single: Mapping[str, float],
    cross: Mapping[str, float],
    countries: Optional[Sequence[str]] = None,
) -> dict[str, Estimator]:
    """
    Better of the single-country and cross-country estimators per country by
    validation R-squared. Ties go to cross-country, which trains on more data.
    """
    chosen = {}
    for country in sorted(countries if countries is not None else set(single) | set(cross)):
        if country not in single:
            raise SelectionError(f"No single-country validation score for {country}")
        if country not in cross:
            raise SelectionError(f"No cross-country validation score for {country}")
        estimator = Estimator.single if single[country] > cross[country] else Estimator.cross
        logger.info(
            f"{country}: {estimator.value} estimator "
            f"(single {single[country]:.4f}, cross {cross[country]:.4f})"
        )
        chosen[country] = estimator
    return chosen


def _active_rows(rows: TrainingRows, width: int) -> TrainingRows:
    return replace(rows, x=rows.x[:, :width])


def _single_country(
    rows: TrainingRows, ctx: _Context
) -> tuple[ValidationReport, dict[str, list[FoldRun]]]:
    units = {}
    folds: dict[str, str] = {}
    predictions: dict[str, float] = {}
    excluded: dict[str, str] = {}
    runs: dict[str, list[FoldRun]] = {}
    countries = np.array(rows.countries)
    k = ctx.config.k
    for country in sorted(set(rows.countries)):
        subset = rows.subset(countries == country)
        if len(subset) < 2:
            excluded[country] = f"{len(subset)} cluster(s)"
            continue
        trainer = _FoldTrainer(ctx, ProtocolChoice.single, scope=country)
        report = kfold(subset, min(k, len(subset)), ctx.seed, trainer, ctx.config.metric)
        units.update(report.units)
        excluded.update(report.excluded)
        predictions.update(report.predictions)
        folds.update({cid: f"{country}/{f}" for cid, f in report.folds.items()})
        runs[country] = trainer.runs
    report = ValidationReport(
        protocol=f"kfold-{k}",
        variant=ctx.config.metric,
        units=units,
        folds=folds,
        predictions=predictions,
        seed=ctx.seed,
        excluded=excluded,
    )
    return report, runs


def _cross_runs(
    rows: TrainingRows, loco_runs: Sequence[FoldRun], countries: Sequence[str], ctx: _Context
) -> dict[str, FoldRun]:
    """Cross-country model per country; fits one for countries LOCO did not hold out."""
    by_country = {run.label: run for run in loco_runs}
    row_countries = np.array(rows.countries)
    for country in countries:
        if country in by_country:
            continue
        others = row_countries != country
        if not others.any():
            continue
        by_country[country] = ctx.fit(ProtocolChoice.cross, country, rows.subset(others), ())
    return by_country


@dataclass
class _PlacePredictions:
    values: dict[str, float] = field(default_factory=dict)
    sources: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def put(self, pid: str, value: float, sources: Sequence[str]) -> None:
        self.values[pid] = float(value)
        self.sources[pid] = tuple(sources)


def _cross_place_predictions(
    data: RefineData, cross: Mapping[str, FoldRun], ctx: _Context
) -> _PlacePredictions:
    out = _PlacePredictions()
    for country, run in sorted(cross.items()):
        places = data.places_of(country)
        for pid, value in zip(places, ctx.place_predictions(run.model, places)):
            out.put(pid, value, (run.key,))
    return out


def _single_place_predictions(
    data: RefineData,
    single: Mapping[str, Sequence[FoldRun]],
    fallback: _PlacePredictions,
    ctx: _Context,
) -> _PlacePredictions:
    """
    Average of the fold models that never trained on a cluster listing the
    place as a candidate; the cross-country prediction when no fold qualifies.
    """
    owners = clusters_by_place(ctx.candidate_sets)
    out = _PlacePredictions()
    for country, runs in sorted(single.items()):
        places = data.places_of(country)
        matrix = np.array([ctx.place_predictions(r.model, places) for r in runs])
        train_sets = [set(r.train_ids) for r in runs]
        for j, pid in enumerate(places):
            eligible = [i for i, t in enumerate(train_sets) if not t & owners.get(pid, set())]
            if eligible:
                value = math.fsum(matrix[eligible, j].tolist()) / len(eligible)
                out.put(pid, value, [runs[i].key for i in eligible])
            elif pid in fallback.values:
                out.put(pid, fallback.values[pid], fallback.sources[pid])
    return out


def _candidate_sets(
    state: RefineState, data: RefineData, iteration: int
) -> tuple[dict[str, CandidateSet], int, int]:
    if iteration < NARROWING_ITERATION:
        return {cid: s.reset() for cid, s in data.candidate_sets.items()}, 0, 0
    observed = {c.cluster_id: c.iwi for c in data.clusters}
    sets = {}
    for cid, cset in sorted(data.candidate_sets.items()):
        if cid not in observed:
            continue
        sets[cid] = narrow(cset.reset(), state.place_predictions, observed[cid])
    skipped = sum(1 for s in sets.values() if s.narrowing_skipped)
    narrowed = sum(
        1
        for s in sets.values()
        if s.narrowed is not None and len(s.narrowed) < len(s.candidates)
    )
    return sets, narrowed, skipped


@dataclass(frozen=True)
class _ClassifierStep:
    model: CnnModel
    labels: Mapping[str, int]
    label_sources: Mapping[str, tuple[str, ...]]
    label_runs: Mapping[str, tuple[str, ...]]
    probs: Mapping[str, tuple[float, ...]]


def _train_classifier(
    state: RefineState, data: RefineData, config: RefineConfig, seed: int, sink: EventSink
) -> _ClassifierStep:
    iteration = state.iteration + 1
    pool = sorted(pid for pid in data.tiles if pid in state.place_predictions)
    labelset = make_labels({pid: state.place_predictions[pid] for pid in pool})
    warm = state.cnn is not None
    if state.cnn is not None:
        check_compatible(state.cnn, config.cnn_spec)
        model = warm_start(state.cnn, config.cnn_spec.fc, seed=seed)
    else:
        model = init_model(config.cnn_spec, seed=seed)
    train_config = replace(config.cnn_train_for(iteration, warm), seed=seed)
    trained = train_cls(
        model,
        [data.tiles[pid] for pid in pool],
        [labelset.labels[pid] for pid in pool],
        train_config,
    )
    trained.thresholds = labelset.thresholds

    ids = sorted(data.tiles)
    probs = predict_proba(trained, [data.tiles[pid] for pid in ids])
    sources = {pid: tuple(state.prediction_sources.get(pid, ())) for pid in pool}
    used = {key for keys in sources.values() for key in keys}
    label_runs = {run.key: run.train_ids for run in state.runs if run.key in used}
    sink(
        ClassifierTrained(
            iteration=iteration,
            tiles=len(pool),
            warm_started=warm,
            final_loss=trained.history[-1] if trained.history else None,
        )
    )
    return _ClassifierStep(
        model=trained,
        labels=dict(labelset.labels),
        label_sources=sources,
        label_runs=label_runs,
        probs={pid: tuple(float(v) for v in row) for pid, row in zip(ids, probs)},
    )


def run_iteration(
    state: RefineState,
    data: RefineData,
    config: RefineConfig,
    sink: EventSink = ignore_event,
) -> RefineState:
    """Run the next refinement iteration and return the new state."""
    iteration = state.iteration + 1
    seed = derive_seed(config.seed, iteration)

    features = data.features
    step: Optional[_ClassifierStep] = None
    if iteration >= IMAGE_ITERATION:
        if data.tiles:
            step = _train_classifier(state, data, config, seed, sink)
            features = features.with_image_probs(step.probs)
            untiled = len(features) - len(step.probs)
            if untiled:
                logger.warning(f"{untiled} places have no tile; image columns stay zero")
        else:
            logger.warning("No tiles configured; image columns stay inactive")
    width = len(FEATURE_COLUMNS) if step is not None else len(BASE_COLUMNS)

    csets, narrowed, skipped = _candidate_sets(state, data, iteration)
    if iteration >= NARROWING_ITERATION:
        sink(NarrowingApplied(iteration=iteration, narrowed=narrowed, skipped=skipped))
        logger.info(f"Iteration {iteration}: narrowed {narrowed} clusters, skipped {skipped}")
    rows = _active_rows(training_rows(csets, features, data.clusters), width)
    sink(
        IterationStarted(
            iteration=iteration, active_columns=width, training_clusters=len(rows)
        )
    )

    ctx = _Context(
        iteration=iteration,
        seed=seed,
        config=config,
        gbt=config.gbt_for(iteration),
        place_x=features.matrix[:, :width],
        place_index=features.index(),
        candidate_sets=data.candidate_sets,
    )
    reports: dict[str, ValidationReport] = {}
    runs: list[FoldRun] = []

    single_runs: dict[str, list[FoldRun]] = {}
    if ProtocolChoice.single in config.protocols:
        reports[ProtocolChoice.single.value], single_runs = _single_country(rows, ctx)
        runs += [r for country in sorted(single_runs) for r in single_runs[country]]

    cross_runs: dict[str, FoldRun] = {}
    if ProtocolChoice.cross in config.protocols:
        trainer = _FoldTrainer(ctx, ProtocolChoice.cross)
        reports[ProtocolChoice.cross.value] = leave_one_country_out(
            rows, trainer, config.metric
        )
        cross_runs = _cross_runs(rows, trainer.runs, data.countries(), ctx)
        runs += [cross_runs[c] for c in sorted(cross_runs)]

    if ProtocolChoice.pooled in config.protocols:
        trainer = _FoldTrainer(ctx, ProtocolChoice.pooled)
        reports[ProtocolChoice.pooled.value] = pooled_eval(
            rows, config.k, seed, trainer, config.metric
        )
        runs += trainer.runs

    for protocol, report in reports.items():
        sink(
            ProtocolScored(
                iteration=iteration, protocol=protocol, mean=report.mean, units=report.scores()
            )
        )

    single_report = reports.get(ProtocolChoice.single.value)
    cross_report = reports.get(ProtocolChoice.cross.value)
    single_scores = single_report.scores() if single_report else {}
    cross_scores = cross_report.scores() if cross_report else {}
    cross_places = _cross_place_predictions(data, cross_runs, ctx)
    single_places = _single_place_predictions(data, single_runs, cross_places, ctx)

    scored = sorted(set(single_scores) & set(cross_scores))
    choices = select_estimator(single_scores, cross_scores, scored)
    for country in data.countries():
        if country in choices:
            continue
        # no paired scores: take whichever estimator produced predictions
        has_cross = any(p in cross_places.values for p in data.places_of(country))
        choices[country] = Estimator.cross if has_cross else Estimator.single
    for country in sorted(choices):
        sink(
            EstimatorChosen(
                iteration=iteration,
                country=country,
                estimator=choices[country].value,
                single=single_scores.get(country),
                cross=cross_scores.get(country),
            )
        )

    predictions: dict[str, float] = {}
    sources: dict[str, tuple[str, ...]] = {}
    estimators: dict[str, Estimator] = {}
    for pid in features.place_ids:
        chosen = choices[data.place_countries[pid]]
        table = single_places if chosen is Estimator.single else cross_places
        if pid not in table.values:
            table = cross_places if table is single_places else single_places
        if pid not in table.values:
            continue
        predictions[pid] = table.values[pid]
        sources[pid] = table.sources[pid]
        estimators[pid] = Estimator.single if table is single_places else Estimator.cross
    unpredicted = len(features) - len(predictions)
    if unpredicted:
        logger.warning(f"Iteration {iteration}: {unpredicted} places have no prediction")

    pooled_report = reports.get(ProtocolChoice.pooled.value)
    metrics = IterationMetrics(
        iteration=iteration,
        single=single_scores,
        cross=cross_scores,
        pooled=pooled_report.scores().get("all") if pooled_report else None,
        choices=choices,
        active_columns=width,
        training_clusters=len(rows),
        pooled_ran=pooled_report is not None,
    )
    logger.info(
        f"Iteration {iteration}: headline R2 "
        f"{metrics.headline if metrics.headline is not None else float('nan'):.4f} "
        f"on {len(rows)} clusters, {width} columns"
    )

    return replace(
        state,
        iteration=iteration,
        k=config.k,
        cluster_countries={c.cluster_id: c.country for c in data.clusters},
        candidate_sets=csets,
        runs=tuple(runs),
        reports=reports,
        place_predictions=predictions,
        prediction_sources=sources,
        place_estimators=estimators,
        cnn=step.model if step is not None else state.cnn,
        cnn_labels=step.labels if step is not None else {},
        label_sources=step.label_sources if step is not None else {},
        label_runs=step.label_runs if step is not None else {},
        thresholds=step.model.thresholds if step is not None else state.thresholds,
        image_probs=step.probs if step is not None else state.image_probs,
        history=state.history + (metrics,),
    )


def regression_stop(
    history: Sequence[IterationMetrics],
    tolerance: float = REGRESSION_TOLERANCE,
    patience: int = REGRESSION_PATIENCE,
) -> Optional[str]:
    """Reason to stop when the headline metric dropped by more than ``tolerance``
    on each of the last ``patience`` iterations, else None."""
    drops = 0
    for prev, cur in zip(reversed(history[:-1]), reversed(history)):
        if prev.headline is None or cur.headline is None:
            break
        if prev.headline - cur.headline > tolerance:
            drops += 1
        else:
            break
        if drops >= patience:
            return (
                f"headline R2 dropped by more than {tolerance} on {patience} "
                f"consecutive iterations (now {history[-1].headline:.4f})"
            )
    return None


def refine(
    data: RefineData,
    config: RefineConfig,
    out_dir: Optional[Path] = None,
    sink: EventSink = ignore_event,
) -> RefineState:
    """
    Run iterations 0..N-1 with an audit after each. Checkpoints and the
    append-only audit log go under ``out_dir`` when given. Raises LeakageError
    after writing the failing audit entry.
    """
    if out_dir is not None:
        clear_checkpoints(out_dir)
    state = RefineState(seed=config.seed)
    for _ in range(config.iterations):
        state = run_iteration(state, data, config, sink)
        report = leakage_audit(state)
        state = replace(state, audits=state.audits + (report,))
        if out_dir is not None:
            save_checkpoint(state, data.clusters, data.place_countries, out_dir)
            append_audit_log(report, Path(out_dir) / AUDIT_LOG)
        sink(
            IterationFinished(
                iteration=state.iteration,
                headline=state.history[-1].headline,
                violations=len(report.violations),
            )
        )
        if not report.clean:
            raise LeakageError(report)
        reason = regression_stop(
            state.history, config.regression_tolerance, config.regression_patience
        )
        if reason is not None:
            logger.warning(f"Stopping refinement: {reason}")
            state = replace(state, stopped=reason)
            sink(RefineStopped(iteration=state.iteration, reason=reason))
            break
    return state
