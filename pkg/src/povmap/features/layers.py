"""
Map layer ingestion: roads, points of interest and building footprints.

Ways and buildings are GeoJSON feature collections; POIs are a CSV of
``poi_id,category,lat,lon``. Records that fail validation are collected on the
layer set's reject list instead of aborting the load.
"""

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Optional

import geojson
import numpy as np
import pandas as pd
from shapely.geometry import Polygon

from povmap.errors import DataError
from povmap.geo import GeoError, GeoPoint, local_xy

logger = logging.getLogger(__name__)

HIGHWAY_CLASSES: frozenset[str] = frozenset(
    {
        "motorway",
        "trunk",
        "trunk_link",
        "primary",
        "primary_link",
        "secondary",
        "secondary_link",
        "tertiary",
        "tertiary_link",
    }
)

POI_CATEGORIES: tuple[str, ...] = (
    "bar",
    "cafe",
    "fast_food",
    "pub",
    "college",
    "kindergarten",
    "library",
    "school",
    "university",
    "bus_station",
    "atm",
    "bank",
    "clinic",
    "dentist",
    "hospital",
    "pharmacy",
    "veterinary",
    "cinema",
    "community_centre",
    "courthouse",
    "embassy",
    "marketplace",
    "police",
    "townhall",
)

PAVED_SURFACES: frozenset[str] = frozenset(
    {
        "paved",
        "asphalt",
        "concrete",
        "concrete:plates",
        "paving_stones",
        "sett",
        "cobblestone",
        "metal",
        "wood",
    }
)
UNPAVED_SURFACES: frozenset[str] = frozenset(
    {
        "unpaved",
        "gravel",
        "fine_gravel",
        "compacted",
        "dirt",
        "earth",
        "ground",
        "grass",
        "mud",
        "sand",
        "pebblestone",
        "rock",
        "salt",
    }
)


class LayerError(DataError):
    """Raised when a layer file cannot be parsed at all."""

    pass


class Surface(str, Enum):
    paved = "paved"
    unpaved = "unpaved"
    unknown = "unknown"


def normalize_surface(raw: Optional[str]) -> Surface:
    if raw is None:
        return Surface.unknown
    value = str(raw).strip().lower()
    if value in PAVED_SURFACES:
        return Surface.paved
    if value in UNPAVED_SURFACES:
        return Surface.unpaved
    return Surface.unknown


def normalize_category(raw: str) -> str:
    return str(raw).strip().lower().replace(" ", "_")


@dataclass(frozen=True)
class Way:
    way_id: str
    points: tuple[GeoPoint, ...]
    highway: str
    surface: Surface = Surface.unknown

    def __post_init__(self) -> None:
        if len(self.points) < 2:
            raise LayerError(f"Way {self.way_id} has {len(self.points)} point(s); need 2")
        if self.highway not in HIGHWAY_CLASSES:
            raise LayerError(f"Way {self.way_id}: highway class '{self.highway}' not a road")


@dataclass(frozen=True)
class Poi:
    poi_id: str
    location: GeoPoint
    category: str

    def __post_init__(self) -> None:
        if self.category not in POI_CATEGORIES:
            raise LayerError(f"POI {self.poi_id}: unknown category '{self.category}'")


@dataclass(frozen=True)
class Building:
    """A footprint ring (closed, first point repeated last) and its area."""

    building_id: str
    ring: tuple[GeoPoint, ...]
    area_m2: float
    centroid: GeoPoint

    def __post_init__(self) -> None:
        if not self.area_m2 > 0:
            raise LayerError(f"Building {self.building_id} has non-positive area")


@dataclass(frozen=True)
class Reject:
    layer: str
    record_id: str
    reason: str


@dataclass(frozen=True)
class LayerSet:
    """Validated map layers for one country. Immutable after ingest."""

    ways: tuple[Way, ...] = ()
    pois: tuple[Poi, ...] = ()
    buildings: tuple[Building, ...] = ()
    rejects: tuple[Reject, ...] = ()
    dropped_tags: int = 0

    @property
    def warning_count(self) -> int:
        return len(self.rejects) + self.dropped_tags


@dataclass
class _Load:
    rejects: list[Reject] = field(default_factory=list)
    dropped: int = 0

    def reject(self, layer: str, record_id: str, reason: str) -> None:
        self.rejects.append(Reject(layer=layer, record_id=record_id, reason=reason))


def _read_features(path: Path) -> list[dict[str, Any]]:
    text = Path(path).read_text(encoding="utf-8")
    if not text.strip():
        return []
    try:
        collection = geojson.loads(text)
    except ValueError as e:
        raise LayerError(f"{path}: not valid JSON ({e})") from e
    if collection.get("type") != "FeatureCollection":
        raise LayerError(f"{path}: expected a FeatureCollection")
    features: list[dict[str, Any]] = list(collection.get("features") or [])
    return features


def _feature_id(feature: dict[str, Any], key: str, index: int, prefix: str) -> str:
    props = feature.get("properties") or {}
    value = feature.get("id", props.get(key))
    return str(value) if value is not None else f"{prefix}{index}"


def _points(coords: Sequence[Sequence[float]]) -> tuple[GeoPoint, ...]:
    return tuple(GeoPoint(float(c[1]), float(c[0])) for c in coords)


def footprint_area_m2(ring: Sequence[GeoPoint], origin: GeoPoint) -> float:
    """Planar area of a ring projected onto the tangent plane at ``origin``."""
    lats = np.array([p.lat for p in ring])
    lons = np.array([p.lon for p in ring])
    return float(Polygon(local_xy(origin, lats, lons)).area)


def _parse_way(feature: dict[str, Any], way_id: str, load: _Load) -> Optional[Way]:
    props = feature.get("properties") or {}
    highway = str(props.get("highway", "")).strip()
    if highway not in HIGHWAY_CLASSES:
        load.dropped += 1
        return None
    geometry = feature.get("geometry") or {}
    if geometry.get("type") != "LineString":
        load.reject("ways", way_id, f"geometry type {geometry.get('type')}")
        return None
    try:
        points = _points(geometry.get("coordinates") or [])
        return Way(
            way_id=way_id,
            points=points,
            highway=highway,
            surface=normalize_surface(props.get("surface")),
        )
    except (GeoError, LayerError, IndexError, TypeError, ValueError) as e:
        load.reject("ways", way_id, str(e))
        return None


def _parse_building(
    feature: dict[str, Any], building_id: str, load: _Load
) -> Optional[Building]:
    geometry = feature.get("geometry") or {}
    if geometry.get("type") != "Polygon":
        load.reject("buildings", building_id, f"geometry type {geometry.get('type')}")
        return None
    try:
        rings = geometry.get("coordinates") or []
        ring = _points(rings[0])
    except (GeoError, IndexError, TypeError, ValueError) as e:
        load.reject("buildings", building_id, str(e))
        return None
    if len(ring) < 4 or ring[0] != ring[-1]:
        load.reject("buildings", building_id, "ring not closed")
        return None
    try:
        return make_building(building_id, ring)
    except LayerError as e:
        load.reject("buildings", building_id, str(e))
        return None


def read_ways(path: Path, load: Optional[_Load] = None) -> list[Way]:
    load = load if load is not None else _Load()
    ways: list[Way] = []
    seen: set[str] = set()
    for i, feature in enumerate(_read_features(path)):
        way_id = _feature_id(feature, "way_id", i, "w")
        if way_id in seen:
            load.reject("ways", way_id, "duplicate id")
            continue
        way = _parse_way(feature, way_id, load)
        if way is not None:
            seen.add(way_id)
            ways.append(way)
    return ways


def read_buildings(path: Path, load: Optional[_Load] = None) -> list[Building]:
    load = load if load is not None else _Load()
    buildings = []
    for i, feature in enumerate(_read_features(path)):
        building_id = _feature_id(feature, "building_id", i, "b")
        building = _parse_building(feature, building_id, load)
        if building is not None:
            buildings.append(building)
    return buildings


def read_pois(path: Path, load: Optional[_Load] = None) -> list[Poi]:
    load = load if load is not None else _Load()
    if Path(path).stat().st_size == 0:
        return []
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    if frame.empty:
        return []
    absent = sorted({"poi_id", "category", "lat", "lon"} - set(frame.columns))
    if absent:
        raise LayerError(f"{path}: missing columns {', '.join(absent)}")

    pois = []
    for row in frame.itertuples(index=False):
        category = normalize_category(row.category)
        if category not in POI_CATEGORIES:
            load.dropped += 1
            continue
        try:
            location = GeoPoint(float(row.lat), float(row.lon))
        except (GeoError, ValueError) as e:
            load.reject("pois", str(row.poi_id), str(e))
            continue
        pois.append(Poi(poi_id=str(row.poi_id), location=location, category=category))
    return pois


def ingest_layers(ways_file: Path, pois_file: Path, buildings_file: Path) -> LayerSet:
    """Load and validate the three map layers of one country."""
    load = _Load()
    layers = LayerSet(
        ways=tuple(read_ways(ways_file, load)),
        pois=tuple(read_pois(pois_file, load)),
        buildings=tuple(read_buildings(buildings_file, load)),
        rejects=tuple(load.rejects),
        dropped_tags=load.dropped,
    )
    logger.info(
        f"Loaded {len(layers.ways)} ways, {len(layers.pois)} POIs and "
        f"{len(layers.buildings)} buildings"
    )
    if load.dropped:
        logger.warning(f"Dropped {load.dropped} records with tags outside the road/POI sets")
    if load.rejects:
        logger.warning(f"Rejected {len(load.rejects)} records with malformed geometry")
    return layers


def _coords(points: Sequence[GeoPoint]) -> list[tuple[float, float]]:
    return [(p.lon, p.lat) for p in points]


def write_ways(ways: Sequence[Way], path: Path) -> None:
    features = [
        geojson.Feature(
            id=way.way_id,
            geometry=geojson.LineString(_coords(way.points)),
            properties={"highway": way.highway, "surface": way.surface.value},
        )
        for way in ways
    ]
    _write_collection(features, path)


def write_buildings(buildings: Sequence[Building], path: Path) -> None:
    features = [
        geojson.Feature(
            id=b.building_id,
            geometry=geojson.Polygon([_coords(b.ring)]),
            properties={},
        )
        for b in buildings
    ]
    _write_collection(features, path)


def write_pois(pois: Sequence[Poi], path: Path) -> None:
    frame = pd.DataFrame(
        {
            "poi_id": [p.poi_id for p in pois],
            "category": [p.category for p in pois],
            "lat": [p.location.lat for p in pois],
            "lon": [p.location.lon for p in pois],
        },
        columns=["poi_id", "category", "lat", "lon"],
    )
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)


def _write_collection(features: list[geojson.Feature], path: Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(
        geojson.dumps(geojson.FeatureCollection(features), sort_keys=True),
        encoding="utf-8",
    )


def make_building(building_id: str, ring: Sequence[GeoPoint]) -> Building:
    """Build a validated footprint from a ring; closes the ring when needed."""
    points = tuple(ring)
    if points[0] != points[-1]:
        points = points + (points[0],)
    shape = Polygon(_coords(points))
    if not shape.is_valid or shape.area <= 0:
        raise LayerError(f"Building {building_id}: self-intersecting or degenerate ring")
    centroid = GeoPoint(float(shape.centroid.y), float(shape.centroid.x))
    return Building(
        building_id=building_id,
        ring=points,
        area_m2=footprint_area_m2(points, centroid),
        centroid=centroid,
    )
