"""
Per-place feature vectors.

Column order is fixed by ``FEATURE_COLUMNS``:

* roads: total and per-surface length inside the cell, distance to the nearest road
* junctions: count inside the cell, distance to the nearest junction
* buildings: count and footprint area of buildings centered inside the cell
* POIs: count inside the cell and distance to the nearest instance, per category
* luminosity: six statistics for each analysis window
* population: window sums
* image classifier probabilities (zero until the refinement loop supplies them)

Distances are measured from the place center. A layer with no instances in the
country yields ``DISTANCE_CAP_M``.
"""

import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import numpy.typing as npt
import pandas as pd
from shapely import STRtree
from shapely.geometry import LineString, MultiLineString, box

from povmap.errors import DataError
from povmap.features.junctions import detect_junctions
from povmap.features.layers import POI_CATEGORIES, LayerSet, Poi, Surface, Way
from povmap.features.spatial_index import PointIndex, SegmentIndex
from povmap.geo import (
    CELL_WINDOW,
    DEFAULT_WINDOWS,
    BBox,
    GeoPoint,
    WindowSpec,
    cell_window,
    haversine_array,
)
from povmap.places import PopulatedPlace
from povmap.rasters import (
    LUMINOSITY_STAT_NAMES,
    EmptyWindowError,
    RasterGrid,
    WindowOutOfGridError,
    window_stats,
    window_sum,
)

logger = logging.getLogger(__name__)

DISTANCE_CAP_M = 100_000.0
IMAGE_CLASSES: tuple[str, ...] = ("poor", "lower_middle", "upper_middle", "rich")

FloatArray = npt.NDArray[np.float64]


def _columns(windows: Sequence[WindowSpec]) -> tuple[str, ...]:
    cols = [
        "road_length_total",
        "road_length_paved",
        "road_length_unpaved",
        "road_length_unknown",
        "dist_nearest_road",
        "junction_count",
        "dist_nearest_junction",
        "building_count",
        "building_area_m2",
    ]
    for category in POI_CATEGORIES:
        cols += [f"poi_{category}_count", f"poi_{category}_dist"]
    for w in windows:
        cols += [f"lum_{stat}_{w.label}" for stat in LUMINOSITY_STAT_NAMES]
    cols += [f"pop_{w.label}" for w in windows]
    return tuple(cols)


BASE_COLUMNS: tuple[str, ...] = _columns(DEFAULT_WINDOWS)
IMAGE_COLUMNS: tuple[str, ...] = tuple(f"img_prob_{c}" for c in IMAGE_CLASSES)
FEATURE_COLUMNS: tuple[str, ...] = BASE_COLUMNS + IMAGE_COLUMNS


class FeatureError(DataError):
    pass


@dataclass(frozen=True)
class RoadLengths:
    total: float = 0.0
    paved: float = 0.0
    unpaved: float = 0.0
    unknown: float = 0.0


@dataclass(frozen=True)
class PoiStat:
    count: int
    dist_m: float


@dataclass(frozen=True)
class FeatureVector:
    place_id: str
    values: tuple[float, ...]
    flags: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if len(self.values) != len(FEATURE_COLUMNS):
            raise FeatureError(
                f"Feature vector for {self.place_id} has {len(self.values)} values, "
                f"expected {len(FEATURE_COLUMNS)}"
            )
        if not all(math.isfinite(v) for v in self.values):
            raise FeatureError(f"Feature vector for {self.place_id} has non-finite values")

    def __getitem__(self, column: str) -> float:
        return self.values[FEATURE_COLUMNS.index(column)]

    def as_dict(self) -> dict[str, float]:
        return dict(zip(FEATURE_COLUMNS, self.values))


def _line(way: Way) -> LineString:
    return LineString([(p.lon, p.lat) for p in way.points])


def _clipped_length(line: LineString, cell: BBox) -> float:
    clipped = line.intersection(box(cell.west, cell.south, cell.east, cell.north))
    if clipped.is_empty:
        return 0.0
    parts = clipped.geoms if isinstance(clipped, MultiLineString) else [clipped]
    total = []
    for part in parts:
        if not isinstance(part, LineString):
            continue
        coords = np.asarray(part.coords)
        if len(coords) < 2:
            continue
        total.extend(
            haversine_array(
                coords[:-1, 1], coords[:-1, 0], coords[1:, 1], coords[1:, 0]
            ).tolist()
        )
    return math.fsum(total)


def road_stats(
    ways: Sequence[Way], cell: BBox, tree: Optional[STRtree] = None
) -> RoadLengths:
    """
    Great-circle length of road inside ``cell``, total and by surface.

    ``tree`` is an optional STRtree over the ways' lon/lat lines, in way order,
    used to skip ways far from the cell.
    """
    if tree is not None:
        query = box(cell.west, cell.south, cell.east, cell.north)
        candidates = sorted(int(i) for i in tree.query(query))
    else:
        candidates = list(range(len(ways)))

    by_surface: dict[Surface, list[float]] = {s: [] for s in Surface}
    for i in candidates:
        way = ways[i]
        length = _clipped_length(_line(way), cell)
        if length > 0:
            by_surface[way.surface].append(length)

    paved = math.fsum(by_surface[Surface.paved])
    unpaved = math.fsum(by_surface[Surface.unpaved])
    unknown = math.fsum(by_surface[Surface.unknown])
    return RoadLengths(
        total=math.fsum([paved, unpaved, unknown]),
        paved=paved,
        unpaved=unpaved,
        unknown=unknown,
    )


class PoiCatalog:
    """POIs grouped by category with one nearest-neighbor index per category."""

    def __init__(self, pois: Sequence[Poi]) -> None:
        grouped: dict[str, list[Poi]] = {c: [] for c in POI_CATEGORIES}
        for poi in pois:
            grouped[poi.category].append(poi)
        self.indexes = {
            category: PointIndex.from_points([p.location for p in members])
            for category, members in grouped.items()
        }

    def stats(self, cell: BBox, place: GeoPoint) -> list[PoiStat]:
        result = []
        for category in POI_CATEGORIES:
            index = self.indexes[category]
            if len(index) == 0:
                result.append(PoiStat(count=0, dist_m=DISTANCE_CAP_M))
                continue
            _, dist = index.nearest(place)
            count = index.count_within(cell.south, cell.west, cell.north, cell.east)
            result.append(PoiStat(count=count, dist_m=dist))
        return result


def poi_stats(
    pois: Sequence[Poi] | PoiCatalog, cell: BBox, place: GeoPoint
) -> list[PoiStat]:
    """Per-category (count inside cell, nearest distance), in ``POI_CATEGORIES`` order."""
    catalog = pois if isinstance(pois, PoiCatalog) else PoiCatalog(pois)
    return catalog.stats(cell, place)


@dataclass
class FeatureExtractor:
    """
    Builds feature vectors for one country's places.

    Indexes over the layers are built once; each ``vector`` call is then a pure
    function of the place.
    """

    layers: LayerSet
    luminosity: RasterGrid
    population: RasterGrid
    _road_tree: Optional[STRtree] = field(init=False, default=None)
    _roads: SegmentIndex = field(init=False)
    _junctions: PointIndex = field(init=False)
    _pois: PoiCatalog = field(init=False)
    _building_lats: FloatArray = field(init=False)
    _building_lons: FloatArray = field(init=False)
    _building_areas: FloatArray = field(init=False)

    def __post_init__(self) -> None:
        ways = self.layers.ways
        if ways:
            self._road_tree = STRtree([_line(w) for w in ways])
        self._roads = SegmentIndex.from_ways(ways)
        self._junctions = PointIndex.from_points(detect_junctions(ways))
        self._pois = PoiCatalog(self.layers.pois)
        buildings = self.layers.buildings
        self._building_lats = np.array([b.centroid.lat for b in buildings], dtype=np.float64)
        self._building_lons = np.array([b.centroid.lon for b in buildings], dtype=np.float64)
        self._building_areas = np.array([b.area_m2 for b in buildings], dtype=np.float64)
        logger.info(
            f"Feature extractor ready: {len(self._roads)} road segments, "
            f"{len(self._junctions)} junctions"
        )

    def vector(
        self, place: PopulatedPlace, image_probs: Optional[Sequence[float]] = None
    ) -> FeatureVector:
        center = place.location
        cell = cell_window(center, CELL_WINDOW)
        flags: list[str] = []
        values: list[float] = []

        roads = road_stats(self.layers.ways, cell, self._road_tree)
        values += [roads.total, roads.paved, roads.unpaved, roads.unknown]
        values.append(self._roads.nearest(center)[1] if len(self._roads) else DISTANCE_CAP_M)

        values.append(
            float(self._junctions.count_within(cell.south, cell.west, cell.north, cell.east))
        )
        values.append(
            self._junctions.nearest(center)[1] if len(self._junctions) else DISTANCE_CAP_M
        )

        inside = cell.contains_array(self._building_lats, self._building_lons)
        values.append(float(np.count_nonzero(inside)))
        values.append(math.fsum(self._building_areas[inside].tolist()))

        for stat in self._pois.stats(cell, center):
            values += [float(stat.count), stat.dist_m]

        for w in DEFAULT_WINDOWS:
            try:
                values += list(window_stats(self.luminosity, center, w).as_tuple())
            except (EmptyWindowError, WindowOutOfGridError):
                flags.append(f"lum_{w.label}_empty")
                values += [0.0] * len(LUMINOSITY_STAT_NAMES)

        for w in DEFAULT_WINDOWS:
            try:
                values.append(window_sum(self.population, center, w).total)
            except WindowOutOfGridError:
                flags.append(f"pop_{w.label}_out_of_grid")
                values.append(0.0)

        if image_probs is None:
            values += [0.0] * len(IMAGE_COLUMNS)
        else:
            if len(image_probs) != len(IMAGE_COLUMNS):
                raise FeatureError(f"Expected {len(IMAGE_COLUMNS)} image probabilities")
            values += [float(p) for p in image_probs]

        return FeatureVector(place_id=place.place_id, values=tuple(values), flags=tuple(flags))

    def table(self, places: Sequence[PopulatedPlace]) -> "FeatureTable":
        vectors = [self.vector(p) for p in places]
        flagged = sum(1 for v in vectors if v.flags)
        if flagged:
            logger.warning(f"{flagged} of {len(vectors)} places have flagged window features")
        return FeatureTable.from_vectors(vectors)


def build_feature_vector(
    place: PopulatedPlace,
    layers: LayerSet,
    grids: tuple[RasterGrid, RasterGrid],
    image_probs: Optional[Sequence[float]] = None,
) -> FeatureVector:
    """One-off feature vector; ``grids`` is (luminosity, population)."""
    luminosity, population = grids
    return FeatureExtractor(layers, luminosity, population).vector(place, image_probs)


@dataclass(frozen=True, eq=False)
class FeatureTable:
    """Feature matrix with one row per place, columns in ``FEATURE_COLUMNS`` order."""

    place_ids: tuple[str, ...]
    matrix: FloatArray
    flags: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.matrix.shape != (len(self.place_ids), len(FEATURE_COLUMNS)):
            raise FeatureError(
                f"Feature matrix shape {self.matrix.shape} does not match "
                f"{len(self.place_ids)} places x {len(FEATURE_COLUMNS)} columns"
            )
        if len(set(self.place_ids)) != len(self.place_ids):
            raise FeatureError("Duplicate place ids in feature table")

    @classmethod
    def from_vectors(cls, vectors: Sequence[FeatureVector]) -> "FeatureTable":
        matrix = np.array([v.values for v in vectors], dtype=np.float64).reshape(
            len(vectors), len(FEATURE_COLUMNS)
        )
        return cls(
            place_ids=tuple(v.place_id for v in vectors),
            matrix=matrix,
            flags={v.place_id: v.flags for v in vectors if v.flags},
        )

    @classmethod
    def concat(cls, tables: Sequence["FeatureTable"]) -> "FeatureTable":
        flags: dict[str, tuple[str, ...]] = {}
        for t in tables:
            flags.update(t.flags)
        return cls(
            place_ids=tuple(pid for t in tables for pid in t.place_ids),
            matrix=np.vstack([t.matrix for t in tables])
            if tables
            else np.zeros((0, len(FEATURE_COLUMNS))),
            flags=flags,
        )

    def __len__(self) -> int:
        return len(self.place_ids)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FeatureTable):
            return NotImplemented
        return self.place_ids == other.place_ids and bool(
            np.array_equal(self.matrix, other.matrix)
        )

    def index(self) -> dict[str, int]:
        return {pid: i for i, pid in enumerate(self.place_ids)}

    def rows(self, place_ids: Sequence[str]) -> FloatArray:
        """Rows for the given places; raises KeyError for unknown ids."""
        lookup = self.index()
        return self.matrix[[lookup[pid] for pid in place_ids]]

    def with_image_probs(self, probs: Mapping[str, Sequence[float]]) -> "FeatureTable":
        """Copy with the image probability columns filled for every listed place."""
        matrix = self.matrix.copy()
        start = len(BASE_COLUMNS)
        for i, pid in enumerate(self.place_ids):
            if pid in probs:
                matrix[i, start:] = np.asarray(probs[pid], dtype=np.float64)
        return FeatureTable(place_ids=self.place_ids, matrix=matrix, flags=self.flags)

    def to_csv(self, path: Path) -> None:
        frame = pd.DataFrame(self.matrix, columns=list(FEATURE_COLUMNS))
        frame.insert(0, "place_id", list(self.place_ids))
        frame["flags"] = ["|".join(self.flags.get(pid, ())) for pid in self.place_ids]
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False)

    @classmethod
    def from_csv(cls, path: Path) -> "FeatureTable":
        frame = pd.read_csv(
            path,
            dtype={"place_id": str, "flags": str},
            keep_default_na=False,
            float_precision="round_trip",
        )
        absent = [c for c in ("place_id", *FEATURE_COLUMNS) if c not in frame.columns]
        if absent:
            raise FeatureError(f"{path}: missing feature columns {', '.join(absent[:5])}")
        place_ids = tuple(frame["place_id"].astype(str))
        flags = {}
        if "flags" in frame.columns:
            for pid, text in zip(place_ids, frame["flags"].astype(str)):
                if text:
                    flags[pid] = tuple(text.split("|"))
        matrix = frame[list(FEATURE_COLUMNS)].to_numpy(dtype=np.float64)
        return cls(place_ids=place_ids, matrix=matrix, flags=flags)
