"""
Survey clusters: candidate place assignment around displaced coordinates,
tercile narrowing against predicted wealth, and averaged training rows.
"""

import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np
import numpy.typing as npt
import pandas as pd

from povmap.errors import DataError
from povmap.features.extract import FeatureTable
from povmap.features.spatial_index import PointIndex
from povmap.geo import (
    GeoPoint,
    WindowSpec,
    cell_window,
    haversine_array,
    initial_bearing_deg,
)
from povmap.places import PlaceSource, PopulatedPlace
from povmap.rasters import RasterGrid, WindowOutOfGridError, box_block

logger = logging.getLogger(__name__)

URBAN_RADIUS_M = 2_000.0
RURAL_RADIUS_M = 5_000.0
QUADRANTS = 4
MIN_NARROWING_CANDIDATES = 3
TERCILE_PERCENTILES: tuple[float, float] = (100.0 / 3.0, 200.0 / 3.0)

FloatArray = npt.NDArray[np.float64]


class ClusterError(DataError):
    pass


class NoCandidatesError(ClusterError):
    """Raised when neither the registry nor the population grid yields a candidate."""

    pass


class Provenance(str, Enum):
    radius = "radius"
    quadrant_fallback = "quadrant-fallback"


class WealthGroup(str, Enum):
    poorer = "poorer"
    middle = "middle"
    richer = "richer"


@dataclass(frozen=True)
class SurveyCluster:
    cluster_id: str
    country: str
    location: GeoPoint
    urban: bool
    iwi: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.iwi <= 100.0:
            raise ClusterError(f"Cluster {self.cluster_id}: IWI {self.iwi} outside [0, 100]")

    @property
    def radius_m(self) -> float:
        return URBAN_RADIUS_M if self.urban else RURAL_RADIUS_M


@dataclass(frozen=True)
class CandidateSet:
    """
    Candidate places for one cluster.

    ``candidates`` is sorted by place id. ``narrowed`` is None until narrowing has
    run; when narrowing is skipped it equals ``candidates`` and
    ``narrowing_skipped`` is set. Fallback candidates are pixel locations that
    are not registry places; they are carried in ``fallback_places``.
    """

    cluster_id: str
    candidates: tuple[str, ...]
    provenance: Provenance = Provenance.radius
    narrowed: Optional[tuple[str, ...]] = None
    narrowing_skipped: bool = False
    group: Optional[WealthGroup] = None
    fallback_places: tuple[PopulatedPlace, ...] = ()

    def __post_init__(self) -> None:
        if not self.candidates:
            raise NoCandidatesError(f"Cluster {self.cluster_id} has no candidates")
        if self.narrowed is not None:
            if not self.narrowed:
                raise ClusterError(f"Cluster {self.cluster_id}: empty narrowed subset")
            if not set(self.narrowed) <= set(self.candidates):
                raise ClusterError(
                    f"Cluster {self.cluster_id}: narrowed subset not within candidates"
                )

    @property
    def active(self) -> tuple[str, ...]:
        return self.narrowed if self.narrowed is not None else self.candidates

    def reset(self) -> "CandidateSet":
        return replace(self, narrowed=None, narrowing_skipped=False, group=None)


@dataclass(frozen=True)
class TrainingRows:
    """One row per cluster: mean feature vector over active candidates and observed IWI."""

    cluster_ids: tuple[str, ...]
    countries: tuple[str, ...]
    x: FloatArray
    y: FloatArray
    excluded: Mapping[str, str] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.cluster_ids)

    def subset(self, mask: npt.NDArray[np.bool_]) -> "TrainingRows":
        return TrainingRows(
            cluster_ids=tuple(c for c, keep in zip(self.cluster_ids, mask) if keep),
            countries=tuple(c for c, keep in zip(self.countries, mask) if keep),
            x=self.x[mask],
            y=self.y[mask],
            excluded=self.excluded,
        )

    def take(self, indices: Sequence[int]) -> "TrainingRows":
        idx = np.asarray(indices, dtype=np.intp)
        return TrainingRows(
            cluster_ids=tuple(self.cluster_ids[i] for i in idx),
            countries=tuple(self.countries[i] for i in idx),
            x=self.x[idx],
            y=self.y[idx],
            excluded=self.excluded,
        )


def _quadrant_places(cluster: SurveyCluster, pop_grid: RasterGrid) -> list[PopulatedPlace]:
    radius = cluster.radius_m
    disk_box = cell_window(cluster.location, WindowSpec(2.0 * radius / 1000.0, strict=False))
    try:
        rows, cols = box_block(pop_grid, disk_box)
    except WindowOutOfGridError:
        return []
    row_centers = pop_grid.row_centers()[rows]
    col_centers = pop_grid.col_centers()[cols]
    lats, lons = np.meshgrid(row_centers, col_centers, indexing="ij")
    values = pop_grid.values[rows, cols]
    valid = pop_grid.valid_mask()[rows, cols] & (values > 0)

    lats, lons, values, valid = lats.ravel(), lons.ravel(), values.ravel(), valid.ravel()
    distance = haversine_array(cluster.location.lat, cluster.location.lon, lats, lons)
    inside = valid & (distance <= radius)
    quadrant = np.floor(
        initial_bearing_deg(cluster.location, lats, lons) / (360.0 / QUADRANTS)
    ).astype(np.int64)

    places = []
    for k in range(QUADRANTS):
        members = np.flatnonzero(inside & (quadrant == k))
        if members.size == 0:
            continue
        # argmax keeps the first pixel in row-major order on ties
        best = members[int(np.argmax(values[members]))]
        places.append(
            PopulatedPlace(
                place_id=f"{cluster.cluster_id}:q{k}",
                source=PlaceSource.raster,
                location=GeoPoint(float(lats[best]), float(lons[best])),
            )
        )
    return places


def _nearest_pixel_place(
    cluster: SurveyCluster, pop_grid: RasterGrid
) -> Optional[PopulatedPlace]:
    valid = pop_grid.valid_mask()
    if not valid.any():
        return None
    lats, lons = np.meshgrid(pop_grid.row_centers(), pop_grid.col_centers(), indexing="ij")
    distance = np.where(
        valid,
        haversine_array(cluster.location.lat, cluster.location.lon, lats, lons),
        np.inf,
    )
    flat = int(np.argmin(distance))
    row, col = divmod(flat, pop_grid.ncols)
    return PopulatedPlace(
        place_id=f"{cluster.cluster_id}:q0",
        source=PlaceSource.raster,
        location=GeoPoint(float(lats[row, col]), float(lons[row, col])),
    )


def assign_candidates(
    cluster: SurveyCluster,
    registry: Sequence[PopulatedPlace],
    pop_grid: RasterGrid,
    index: Optional[PointIndex] = None,
) -> CandidateSet:
    """
    Registry places within the cluster's displacement radius.

    When none qualify, the radius disk is split into four bearing quadrants
    ([0, 90), [90, 180), ...) and the most populated pixel of each becomes a
    candidate. When the disk holds no populated pixel at all, the nearest valid
    pixel of the grid is used.
    """
    index = index if index is not None else PointIndex.from_points([p.location for p in registry])
    hits = index.within(cluster.location, cluster.radius_m)
    if hits.size:
        return CandidateSet(
            cluster_id=cluster.cluster_id,
            candidates=tuple(sorted(registry[int(i)].place_id for i in hits)),
        )

    places = _quadrant_places(cluster, pop_grid)
    if not places:
        nearest = _nearest_pixel_place(cluster, pop_grid)
        if nearest is None:
            raise NoCandidatesError(
                f"Cluster {cluster.cluster_id}: no places in radius and no grid data"
            )
        places = [nearest]
    logger.debug(f"Cluster {cluster.cluster_id}: {len(places)} quadrant fallback candidates")
    return CandidateSet(
        cluster_id=cluster.cluster_id,
        candidates=tuple(sorted(p.place_id for p in places)),
        provenance=Provenance.quadrant_fallback,
        fallback_places=tuple(sorted(places, key=lambda p: p.place_id)),
    )


def assign_all(
    clusters: Sequence[SurveyCluster],
    registry: Sequence[PopulatedPlace],
    pop_grid: RasterGrid,
) -> tuple[dict[str, CandidateSet], dict[str, str]]:
    """Candidate sets for every cluster plus the clusters that had none."""
    index = PointIndex.from_points([p.location for p in registry])
    sets: dict[str, CandidateSet] = {}
    failed: dict[str, str] = {}
    for cluster in clusters:
        try:
            sets[cluster.cluster_id] = assign_candidates(cluster, registry, pop_grid, index)
        except NoCandidatesError as e:
            failed[cluster.cluster_id] = str(e)
    fallbacks = sum(1 for s in sets.values() if s.provenance is Provenance.quadrant_fallback)
    logger.info(
        f"Assigned candidates to {len(sets)} clusters ({fallbacks} by quadrant fallback)"
    )
    if failed:
        logger.warning(f"{len(failed)} clusters have no candidates")
    return sets, failed


def tercile_thresholds(predictions: Sequence[float]) -> tuple[float, float]:
    lower, upper = np.percentile(np.asarray(predictions, dtype=np.float64), TERCILE_PERCENTILES)
    return float(lower), float(upper)


def _group(value: float, lower: float, upper: float) -> WealthGroup:
    if value < lower:
        return WealthGroup.poorer
    if value < upper:
        return WealthGroup.middle
    return WealthGroup.richer


def narrow(
    candidate_set: CandidateSet, predictions: Mapping[str, float], observed_iwi: float
) -> CandidateSet:
    """
    Keep the candidates whose predicted wealth falls in the observed value's tercile.

    Thresholds are the 33.3rd and 66.7th percentiles (linear interpolation) of the
    candidates' predictions. Intervals are [.., lower), [lower, upper), [upper, ..).
    An empty group falls back to the candidate closest to the observed value,
    ties to the smaller place id.
    """
    candidates = candidate_set.candidates
    if len(candidates) < MIN_NARROWING_CANDIDATES:
        return replace(
            candidate_set, narrowed=candidates, narrowing_skipped=True, group=None
        )
    missing = [pid for pid in candidates if pid not in predictions]
    if missing:
        raise ClusterError(
            f"Cluster {candidate_set.cluster_id}: no prediction for {', '.join(missing)}"
        )

    values = [float(predictions[pid]) for pid in candidates]
    lower, upper = tercile_thresholds(values)
    group = _group(observed_iwi, lower, upper)
    narrowed = tuple(
        pid for pid, v in zip(candidates, values) if _group(v, lower, upper) is group
    )
    if not narrowed:
        closest = min(zip(candidates, values), key=lambda pv: (abs(pv[1] - observed_iwi), pv[0]))
        narrowed = (closest[0],)
    return replace(candidate_set, narrowed=narrowed, narrowing_skipped=False, group=group)


def training_rows(
    candidate_sets: Mapping[str, CandidateSet],
    features: FeatureTable,
    clusters: Sequence[SurveyCluster],
) -> TrainingRows:
    """
    Mean feature vector over each cluster's active candidates.

    Clusters without a candidate set, or with a candidate missing from
    ``features``, are excluded and listed in ``excluded``.
    """
    lookup = features.index()
    ids: list[str] = []
    countries: list[str] = []
    xs: list[FloatArray] = []
    ys: list[float] = []
    excluded: dict[str, str] = {}
    for cluster in clusters:
        cset = candidate_sets.get(cluster.cluster_id)
        if cset is None:
            excluded[cluster.cluster_id] = "no candidate set"
            continue
        absent = [pid for pid in cset.active if pid not in lookup]
        if absent:
            excluded[cluster.cluster_id] = f"missing features for {', '.join(absent)}"
            continue
        block = features.matrix[[lookup[pid] for pid in cset.active]]
        xs.append(block.sum(axis=0) / len(block))
        ids.append(cluster.cluster_id)
        countries.append(cluster.country)
        ys.append(cluster.iwi)

    if excluded:
        logger.warning(f"{len(excluded)} clusters excluded from training rows")
    width = features.matrix.shape[1]
    return TrainingRows(
        cluster_ids=tuple(ids),
        countries=tuple(countries),
        x=np.array(xs, dtype=np.float64).reshape(len(xs), width),
        y=np.array(ys, dtype=np.float64),
        excluded=excluded,
    )


_TRUE = {"1", "true", "t", "yes", "y", "u", "urban"}
_FALSE = {"0", "false", "f", "no", "n", "r", "rural"}


def _parse_urban(text: str, cluster_id: str) -> bool:
    value = text.strip().lower()
    if value in _TRUE:
        return True
    if value in _FALSE:
        return False
    raise ClusterError(f"Cluster {cluster_id}: urban flag '{text}' not recognized")


def read_clusters(path: Path) -> list[SurveyCluster]:
    """Read ``cluster_id,country,lat,lon,urban,iwi``."""
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    required = {"cluster_id", "country", "lat", "lon", "urban", "iwi"}
    absent = sorted(required - set(frame.columns))
    if absent:
        raise ClusterError(f"{path}: missing columns {', '.join(absent)}")
    clusters = []
    for row in frame.itertuples(index=False):
        cid = str(row.cluster_id)
        try:
            clusters.append(
                SurveyCluster(
                    cluster_id=cid,
                    country=str(row.country),
                    location=GeoPoint(float(row.lat), float(row.lon)),
                    urban=_parse_urban(str(row.urban), cid),
                    iwi=float(row.iwi),
                )
            )
        except ValueError as e:
            raise ClusterError(f"{path}: cluster {cid} malformed ({e})") from e
    if len({c.cluster_id for c in clusters}) != len(clusters):
        raise ClusterError(f"{path}: duplicate cluster ids")
    logger.info(f"Read {len(clusters)} clusters from {path}")
    return clusters


def write_clusters(clusters: Sequence[SurveyCluster], path: Path) -> None:
    frame = pd.DataFrame(
        {
            "cluster_id": [c.cluster_id for c in clusters],
            "country": [c.country for c in clusters],
            "lat": [c.location.lat for c in clusters],
            "lon": [c.location.lon for c in clusters],
            "urban": [int(c.urban) for c in clusters],
            "iwi": [c.iwi for c in clusters],
        },
        columns=["cluster_id", "country", "lat", "lon", "urban", "iwi"],
    )
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)


def mean_prediction(cset: CandidateSet, predictions: Mapping[str, float]) -> float:
    """Cluster-level prediction: mean over the full candidate set."""
    return math.fsum(predictions[pid] for pid in cset.candidates) / len(cset.candidates)
