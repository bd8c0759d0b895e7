"""
International Wealth Index scoring for households and survey clusters.

Weights are data: a key/value file with a ``version`` entry, a ``constant`` and
one ``<indicator>.<category>`` entry per category, categories listed from the
lowest (least wealthy) upwards.
"""

import logging
import math
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import pandas as pd
from dotenv import dotenv_values

from povmap.errors import DataError

logger = logging.getLogger(__name__)

DEFAULT_WEIGHTS_FILE = Path(__file__).parent / "data" / "iwi_weights.txt"

INDICATORS: tuple[str, ...] = (
    "tv",
    "fridge",
    "phone",
    "bike",
    "car",
    "water",
    "electricity",
    "rooms",
    "floor",
    "toilet",
)
MAX_MISSING_INDICATORS = 3
IWI_MIN = 0.0
IWI_MAX = 100.0


class IwiError(DataError):
    """Raised for invalid weight files or household records."""

    pass


class UnscoreableRecordError(IwiError):
    """Raised when a household has more missing indicators than the index allows."""

    def __init__(self, household_id: str, missing: tuple[str, ...]) -> None:
        self.household_id = household_id
        self.missing = missing
        super().__init__(
            f"Household {household_id} has {len(missing)} missing indicators "
            f"({', '.join(missing)}); at most {MAX_MISSING_INDICATORS} allowed"
        )


@dataclass(frozen=True)
class IwiWeights:
    """Constant term plus per-indicator category weights."""

    version: str
    constant: float
    table: Mapping[str, Mapping[str, float]]

    def __post_init__(self) -> None:
        absent = [name for name in INDICATORS if not self.table.get(name)]
        if absent:
            raise IwiError(f"Weights {self.version} lack indicators: {', '.join(absent)}")

    def categories(self, indicator: str) -> tuple[str, ...]:
        return tuple(self.table[indicator])

    def lowest(self, indicator: str) -> str:
        return self.categories(indicator)[0]


@dataclass(frozen=True)
class HouseholdRecord:
    """
    One surveyed household.

    ``indicators`` maps each indicator name to its category, or None when the
    indicator was not recorded.
    """

    household_id: str
    cluster_id: str
    indicators: Mapping[str, Optional[str]]

    def missing(self) -> tuple[str, ...]:
        return tuple(name for name in INDICATORS if self.indicators.get(name) is None)


@dataclass(frozen=True)
class IwiScore:
    score: float
    imputed: tuple[str, ...] = ()

    @property
    def flagged(self) -> bool:
        return bool(self.imputed)


@dataclass(frozen=True)
class ClusterIwi:
    """Cluster means plus the households and clusters that could not be scored."""

    means: Mapping[str, float]
    household_counts: Mapping[str, int]
    unscoreable: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    empty_clusters: tuple[str, ...] = ()


def load_weights(path: Optional[Path] = None) -> IwiWeights:
    """Load a weight file; defaults to the shipped reference weights."""
    source = Path(path) if path is not None else DEFAULT_WEIGHTS_FILE
    if not source.exists():
        raise IwiError(f"Weight file {source} not found")
    entries = dotenv_values(source)

    version = entries.pop("version", None)
    if not version:
        raise IwiError(f"{source}: missing 'version' entry")
    constant_text = entries.pop("constant", None)
    if constant_text is None:
        raise IwiError(f"{source}: missing 'constant' entry")

    table: dict[str, dict[str, float]] = {}
    for key, value in entries.items():
        indicator, sep, category = key.partition(".")
        if not sep or value is None:
            raise IwiError(f"{source}: malformed entry '{key}'")
        if indicator not in INDICATORS:
            logger.warning(f"{source}: ignoring weight for unknown indicator '{key}'")
            continue
        try:
            table.setdefault(indicator, {})[category] = float(value)
        except ValueError as e:
            raise IwiError(f"{source}: non-numeric weight for '{key}'") from e

    weights = IwiWeights(version=version, constant=float(constant_text), table=table)
    logger.info(f"Loaded IWI weights {weights.version} from {source}")
    return weights


def compute_iwi(h: HouseholdRecord, w: IwiWeights) -> IwiScore:
    """
    Score one household.

    Missing indicators contribute their lowest-category weight and are listed in
    the returned score's ``imputed`` field.
    """
    missing = h.missing()
    if len(missing) > MAX_MISSING_INDICATORS:
        raise UnscoreableRecordError(h.household_id, missing)

    terms = [w.constant]
    for name in INDICATORS:
        category = h.indicators.get(name)
        if category is None:
            category = w.lowest(name)
        weight = w.table[name].get(category)
        if weight is None:
            raise IwiError(
                f"Household {h.household_id}: category '{category}' not valid for "
                f"'{name}' (expected one of {', '.join(w.categories(name))})"
            )
        terms.append(weight)

    raw = math.fsum(terms)
    return IwiScore(score=min(IWI_MAX, max(IWI_MIN, raw)), imputed=missing)


def cluster_iwi(records: Iterable[HouseholdRecord], w: IwiWeights) -> ClusterIwi:
    """Mean household score per cluster."""
    scores: dict[str, list[float]] = {}
    rejected: dict[str, list[str]] = {}
    seen = 0
    for record in records:
        seen += 1
        scores.setdefault(record.cluster_id, [])
        try:
            scores[record.cluster_id].append(compute_iwi(record, w).score)
        except UnscoreableRecordError:
            rejected.setdefault(record.cluster_id, []).append(record.household_id)

    if seen == 0:
        raise IwiError("No household records to aggregate")

    means = {
        cid: math.fsum(values) / len(values)
        for cid, values in sorted(scores.items())
        if values
    }
    empty = tuple(sorted(cid for cid, values in scores.items() if not values))
    if rejected:
        total = sum(len(v) for v in rejected.values())
        logger.warning(f"{total} household records rejected as unscoreable")
    if empty:
        logger.warning(f"Clusters with no scoreable households: {', '.join(empty)}")

    return ClusterIwi(
        means=means,
        household_counts={cid: len(v) for cid, v in sorted(scores.items()) if v},
        unscoreable={cid: tuple(ids) for cid, ids in sorted(rejected.items())},
        empty_clusters=empty,
    )


def read_households(path: Path) -> list[HouseholdRecord]:
    """Read a household CSV; an empty cell marks a missing indicator."""
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    required = {"household_id", "cluster_id", *INDICATORS}
    absent = sorted(required - set(frame.columns))
    if absent:
        raise IwiError(f"{path}: missing columns {', '.join(absent)}")

    records = []
    for row in frame.itertuples(index=False):
        values = row._asdict()
        records.append(
            HouseholdRecord(
                household_id=str(values["household_id"]),
                cluster_id=str(values["cluster_id"]),
                indicators={
                    name: (str(values[name]).strip() or None) for name in INDICATORS
                },
            )
        )
    logger.info(f"Read {len(records)} household records from {path}")
    return records


def write_cluster_iwi(result: ClusterIwi, path: Path) -> None:
    frame = pd.DataFrame(
        {
            "cluster_id": list(result.means),
            "iwi": list(result.means.values()),
            "households": [result.household_counts[c] for c in result.means],
        }
    )
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)
