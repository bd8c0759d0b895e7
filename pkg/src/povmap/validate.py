"""
Validation metrics and protocols.

A trainer is any callable ``(train_rows, test_rows) -> predictions`` returning
one prediction per test row. Protocols call it once per fold and score the
out-of-fold predictions.
"""

import json
import logging
import math
from collections.abc import Callable, Mapping, Sequence
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Optional

import numpy as np
import numpy.typing as npt
import pandas as pd

from povmap.clusters import TrainingRows
from povmap.errors import DataError

logger = logging.getLogger(__name__)

FloatArray = npt.NDArray[np.float64]
Trainer = Callable[[TrainingRows, TrainingRows], FloatArray]

DEFAULT_K = 5
POOLED_UNIT = "all"
REPORT_FORMAT_VERSION = 1

# published figures; context only, not reproducible without restricted survey data
REFERENCE_METADATA: dict[str, float] = {
    "single_country_mean_r2": 0.8812,
    "cross_country_mean_r2": 0.8560,
    "pooled_r2": 0.917,
    "best_single_country_r2": 0.9491,
}


class MetricUndefinedError(DataError):
    """Raised when R² is undefined for the given observations."""

    pass


class FoldError(DataError):
    """Raised for impossible fold configurations."""

    pass


class MetricVariant(str, Enum):
    pearson2 = "pearson2"
    ssres = "ssres"


def r_squared(
    y_obs: Sequence[float] | FloatArray,
    y_pred: Sequence[float] | FloatArray,
    variant: MetricVariant = MetricVariant.pearson2,
) -> float:
    """
    Coefficient of determination.

    ``pearson2`` is the squared Pearson correlation; ``ssres`` is
    1 - SSres/SStot. Constant observations make both undefined. Constant
    predictions give pearson2 = 0.
    """
    obs = np.asarray(y_obs, dtype=np.float64)
    pred = np.asarray(y_pred, dtype=np.float64)
    if obs.shape != pred.shape or obs.ndim != 1:
        raise MetricUndefinedError(
            f"Observed and predicted shapes differ: {obs.shape} vs {pred.shape}"
        )
    if obs.size < 2:
        raise MetricUndefinedError("R-squared needs at least 2 observations")
    dy = obs - obs.mean()
    syy = math.fsum((dy * dy).tolist())
    if syy == 0.0:
        raise MetricUndefinedError("R-squared undefined for constant observations")

    if variant is MetricVariant.ssres:
        resid = obs - pred
        return 1.0 - math.fsum((resid * resid).tolist()) / syy

    dx = pred - pred.mean()
    sxx = math.fsum((dx * dx).tolist())
    if sxx == 0.0:
        return 0.0
    sxy = math.fsum((dx * dy).tolist())
    r = sxy / math.sqrt(sxx * syy)
    return min(1.0, r * r)


def kfold_indices(n: int, k: int, seed: int) -> list[npt.NDArray[np.intp]]:
    """Seeded shuffled partition of ``range(n)`` into k folds differing in size by <=1."""
    if k < 2:
        raise FoldError(f"k must be >= 2, got {k}")
    if k > n:
        raise FoldError(f"k={k} exceeds the number of rows ({n})")
    permutation = np.random.default_rng(seed).permutation(n)
    return [np.sort(fold).astype(np.intp) for fold in np.array_split(permutation, k)]


@dataclass(frozen=True)
class UnitScore:
    pearson2: Optional[float]
    ssres: Optional[float]
    n: int

    def value(self, variant: MetricVariant) -> Optional[float]:
        return self.pearson2 if variant is MetricVariant.pearson2 else self.ssres


@dataclass(frozen=True)
class ValidationReport:
    """
    Scores of one protocol run.

    ``folds`` maps row (cluster) ids to fold labels: a fold number for k-fold
    protocols, the held-out country for leave-one-country-out.
    """

    protocol: str
    variant: MetricVariant
    units: Mapping[str, UnitScore]
    folds: Mapping[str, str]
    predictions: Mapping[str, float]
    seed: Optional[int] = None
    excluded: Mapping[str, str] = field(default_factory=dict)
    metadata: Mapping[str, float] = field(default_factory=lambda: dict(REFERENCE_METADATA))

    def scores(self) -> dict[str, float]:
        """Per-unit values of the selected variant, undefined units omitted."""
        result = {}
        for unit, score in sorted(self.units.items()):
            value = score.value(self.variant)
            if value is not None:
                result[unit] = value
        return result

    @property
    def mean(self) -> Optional[float]:
        values = list(self.scores().values())
        return math.fsum(values) / len(values) if values else None

    def to_dict(self) -> dict[str, Any]:
        return {
            "version": REPORT_FORMAT_VERSION,
            "protocol": self.protocol,
            "variant": self.variant.value,
            "mean": self.mean,
            "seed": self.seed,
            "units": {u: asdict(s) for u, s in sorted(self.units.items())},
            "folds": dict(sorted(self.folds.items())),
            "predictions": dict(sorted(self.predictions.items())),
            "excluded": dict(sorted(self.excluded.items())),
            "metadata": dict(self.metadata),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ValidationReport":
        return cls(
            protocol=str(data["protocol"]),
            variant=MetricVariant(data["variant"]),
            units={u: UnitScore(**s) for u, s in data["units"].items()},
            folds={str(k): str(v) for k, v in data["folds"].items()},
            predictions={str(k): float(v) for k, v in data["predictions"].items()},
            seed=data.get("seed"),
            excluded=dict(data.get("excluded", {})),
            metadata=dict(data.get("metadata", {})),
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ValidationReport):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def __hash__(self) -> int:
        return hash(json.dumps(self.to_dict(), sort_keys=True))


def _score(obs: FloatArray, pred: FloatArray) -> Optional[UnitScore]:
    try:
        return UnitScore(
            pearson2=r_squared(obs, pred, MetricVariant.pearson2),
            ssres=r_squared(obs, pred, MetricVariant.ssres),
            n=int(obs.size),
        )
    except MetricUndefinedError:
        return None


def _predict_folds(
    rows: TrainingRows, folds: Sequence[npt.NDArray[np.intp]], trainer: Trainer
) -> FloatArray:
    predictions = np.full(len(rows), np.nan)
    for i, test in enumerate(folds):
        train = np.setdiff1d(np.arange(len(rows)), test)
        out = np.asarray(trainer(rows.take(train), rows.take(test)), dtype=np.float64)
        if out.shape != (len(test),):
            raise FoldError(f"Trainer returned {out.shape} predictions for {len(test)} rows")
        predictions[test] = out
        logger.debug(f"Fold {i}: trained on {len(train)} rows, predicted {len(test)}")
    return predictions


def _group_scores(
    rows: TrainingRows, predictions: FloatArray
) -> tuple[dict[str, UnitScore], dict[str, str]]:
    units: dict[str, UnitScore] = {}
    excluded: dict[str, str] = {}
    countries = np.array(rows.countries)
    for country in sorted(set(rows.countries)):
        mask = countries == country
        score = _score(rows.y[mask], predictions[mask])
        if score is None:
            excluded[country] = "metric undefined"
        else:
            units[country] = score
    return units, excluded


def kfold(
    rows: TrainingRows,
    k: int,
    seed: int,
    trainer: Trainer,
    variant: MetricVariant = MetricVariant.pearson2,
) -> ValidationReport:
    """Seeded k-fold cross-validation; out-of-fold predictions scored per country."""
    folds = kfold_indices(len(rows), k, seed)
    predictions = _predict_folds(rows, folds, trainer)
    units, excluded = _group_scores(rows, predictions)
    return ValidationReport(
        protocol=f"kfold-{k}",
        variant=variant,
        units=units,
        folds=_fold_labels(rows, folds),
        predictions=dict(zip(rows.cluster_ids, predictions.tolist())),
        seed=seed,
        excluded=excluded,
    )


def _fold_labels(
    rows: TrainingRows, folds: Sequence[npt.NDArray[np.intp]]
) -> dict[str, str]:
    labels = {}
    for i, fold in enumerate(folds):
        for j in fold:
            labels[rows.cluster_ids[int(j)]] = str(i)
    return labels


def leave_one_country_out(
    rows: TrainingRows,
    trainer: Trainer,
    variant: MetricVariant = MetricVariant.pearson2,
) -> ValidationReport:
    """
    Train on all other countries, score on each held-out country.

    Countries with fewer than 2 clusters are not held out (they still train the
    others) and are listed in ``excluded``.
    """
    countries = np.array(rows.countries)
    names = sorted(set(rows.countries))
    if len(names) < 2:
        raise FoldError(f"Leave-one-country-out needs >= 2 countries, got {len(names)}")

    units: dict[str, UnitScore] = {}
    excluded: dict[str, str] = {}
    predictions: dict[str, float] = {}
    folds: dict[str, str] = {}
    for country in names:
        test = np.flatnonzero(countries == country)
        if test.size < 2:
            excluded[country] = f"{test.size} cluster(s)"
            continue
        train = np.flatnonzero(countries != country)
        out = np.asarray(trainer(rows.take(train), rows.take(test)), dtype=np.float64)
        if out.shape != (test.size,):
            raise FoldError(f"Trainer returned {out.shape} predictions for {test.size} rows")
        for j, value in zip(test, out):
            predictions[rows.cluster_ids[int(j)]] = float(value)
            folds[rows.cluster_ids[int(j)]] = country
        score = _score(rows.y[test], out)
        if score is None:
            excluded[country] = "metric undefined"
        else:
            units[country] = score
        logger.debug(f"Held out {country}: {test.size} clusters")

    if excluded:
        logger.warning(f"Countries excluded from scoring: {', '.join(sorted(excluded))}")
    return ValidationReport(
        protocol="loco",
        variant=variant,
        units=units,
        folds=folds,
        predictions=predictions,
        excluded=excluded,
    )


def pooled_eval(
    rows: TrainingRows,
    k: int,
    seed: int,
    trainer: Trainer,
    variant: MetricVariant = MetricVariant.pearson2,
) -> ValidationReport:
    """k-fold over all rows with country identity ignored; scored as one unit."""
    if len(set(rows.countries)) < 2:
        raise FoldError("Pooled evaluation needs rows from >= 2 countries")
    folds = kfold_indices(len(rows), k, seed)
    predictions = _predict_folds(rows, folds, trainer)
    score = _score(rows.y, predictions)
    units = {POOLED_UNIT: score} if score is not None else {}
    return ValidationReport(
        protocol="pooled",
        variant=variant,
        units=units,
        folds=_fold_labels(rows, folds),
        predictions=dict(zip(rows.cluster_ids, predictions.tolist())),
        seed=seed,
        excluded={} if score is not None else {POOLED_UNIT: "metric undefined"},
    )


def write_report(report: ValidationReport, out_dir: Path, name: str) -> tuple[Path, Path]:
    """Write ``<name>.json`` and ``<name>.csv`` (unit, r2, n)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    json_path = out / f"{name}.json"
    csv_path = out / f"{name}.csv"
    json_path.write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    scores = report.scores()
    frame = pd.DataFrame(
        {
            "unit": list(scores),
            "r2": list(scores.values()),
            "n": [report.units[u].n for u in scores],
        },
        columns=["unit", "r2", "n"],
    )
    frame.to_csv(csv_path, index=False)
    return json_path, csv_path


def read_report(path: Path) -> ValidationReport:
    return ValidationReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
