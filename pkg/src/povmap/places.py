"""
Populated-place registry: merging two place lists, extracting unlisted
settlements from a population grid and attaching window populations.
"""

import logging
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from povmap.errors import DataError
from povmap.geo import (
    DEFAULT_WINDOWS,
    METERS_PER_DEGREE,
    BBox,
    GeoPoint,
    WindowSpec,
    haversine_array,
)
from povmap.rasters import RasterGrid, WindowOutOfGridError, window_sum

logger = logging.getLogger(__name__)

MERGE_DISTANCE_M = 1000.0
RASTER_PLACE_MIN_POPULATION = 100.0
RASTER_CELL_KM = 1.6
SETTLEMENT_TAGS: frozenset[str] = frozenset(
    {"city", "town", "village", "hamlet", "isolated_dwelling"}
)
REGISTRY_COLUMNS: tuple[str, ...] = (
    "place_id",
    "source",
    "name",
    "lat",
    "lon",
    "admin1",
    "admin2",
    "pop_1p6",
    "pop_5",
    "pop_10",
)
NAME_SEPARATOR = "|"
FLAG_POP_NODATA = "pop-nodata"


class PlaceError(DataError):
    """Raised for invalid place inputs."""

    pass


class PlaceSource(str, Enum):
    """Where a populated place came from."""

    list_a = "list-a"
    list_b = "list-b"
    raster = "raster-derived"


@dataclass(frozen=True)
class PopulatedPlace:
    """A settlement anchor representing a roughly one-square-mile inhabited cell."""

    place_id: str
    source: PlaceSource
    location: GeoPoint
    names: tuple[str, ...] = ()
    admin1: Optional[str] = None
    admin2: Optional[str] = None
    pop_1p6: Optional[float] = None
    pop_5: Optional[float] = None
    pop_10: Optional[float] = None
    flags: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        for value in (self.pop_1p6, self.pop_5, self.pop_10):
            if value is not None and value < 0:
                raise PlaceError(f"Place {self.place_id} has negative population")

    @property
    def name(self) -> Optional[str]:
        return self.names[0] if self.names else None

    def populations(self) -> tuple[Optional[float], Optional[float], Optional[float]]:
        return (self.pop_1p6, self.pop_5, self.pop_10)


def _union_names(a: tuple[str, ...], b: tuple[str, ...]) -> tuple[str, ...]:
    merged = list(a)
    for name in b:
        if name not in merged:
            merged.append(name)
    return tuple(merged)


def merge_places(
    list_a: Sequence[PopulatedPlace],
    list_b: Sequence[PopulatedPlace],
    threshold_m: float = MERGE_DISTANCE_M,
) -> list[PopulatedPlace]:
    """
    Greedy source-priority merge.

    List A records are visited first, then list B. A record less than
    ``threshold_m`` from an already accepted record is folded into the nearest
    one (keeping that record's coordinates and adding its names); otherwise it
    is accepted. The rule applies within each list too, so input order matters.
    """
    records = [*list_a, *list_b]
    accepted: list[PopulatedPlace] = []
    lats = np.empty(len(records), dtype=np.float64)
    lons = np.empty(len(records), dtype=np.float64)
    seen_ids: set[str] = set()
    merged = 0

    for record in records:
        k = len(accepted)
        if k:
            distances = haversine_array(
                record.location.lat, record.location.lon, lats[:k], lons[:k]
            )
            nearest = int(np.argmin(distances))
            if distances[nearest] < threshold_m:
                target = accepted[nearest]
                accepted[nearest] = replace(
                    target,
                    names=_union_names(target.names, record.names),
                    admin1=target.admin1 or record.admin1,
                    admin2=target.admin2 or record.admin2,
                )
                merged += 1
                continue
        if record.place_id in seen_ids:
            raise PlaceError(f"Duplicate place_id {record.place_id}")
        seen_ids.add(record.place_id)
        lats[k] = record.location.lat
        lons[k] = record.location.lon
        accepted.append(record)

    logger.info(
        f"Merged {len(list_a)} list-A and {len(list_b)} list-B places into "
        f"{len(accepted)} ({merged} folded within {threshold_m:g} m)"
    )
    return accepted


def _cell_ids(
    lats: np.ndarray, lons: np.ndarray, bounds: BBox, side_m: float
) -> np.ndarray:
    """
    Tile index of each coordinate for a tiling of ``bounds`` into square cells.

    Rows are ``side_m`` tall; each row's cells are ``side_m`` wide at the row's
    central latitude. Points outside the bounds get -1.
    """
    dlat = side_m / METERS_PER_DEGREE
    n_rows = max(1, math.ceil((bounds.north - bounds.south) / dlat))
    # cells are never narrower than dlat degrees, which bounds the row width
    max_cols = math.ceil((bounds.east - bounds.west) / dlat) + 1
    row = np.floor((lats - bounds.south) / dlat).astype(np.int64)
    row_center = bounds.south + (row + 0.5) * dlat
    dlon = dlat / np.cos(np.radians(row_center))
    col = np.floor((lons - bounds.west) / dlon).astype(np.int64)
    inside = (
        (row >= 0)
        & (row < n_rows)
        & (col >= 0)
        & (lats <= bounds.north)
        & (lons <= bounds.east)
    )
    return np.where(inside, row * max_cols + col, -1)


def extract_raster_places(
    pop_grid: RasterGrid,
    registry: Sequence[PopulatedPlace],
    bounds: Optional[BBox] = None,
    min_population: float = RASTER_PLACE_MIN_POPULATION,
    cell_km: float = RASTER_CELL_KM,
    id_prefix: str = "R",
) -> list[PopulatedPlace]:
    """
    Emit a place for each populated cell that no registry place falls in.

    The country bounds (default: the grid extent) are tiled into ``cell_km``
    cells; a cell whose valid population exceeds ``min_population`` and that
    holds no registry place yields one place at its most populated pixel.
    """
    bounds = bounds or pop_grid.extent
    if not pop_grid.extent.intersects(bounds):
        raise PlaceError(f"Bounds {bounds} do not overlap population grid")

    side_m = cell_km * 1000.0
    lat_grid, lon_grid = np.meshgrid(
        pop_grid.row_centers(), pop_grid.col_centers(), indexing="ij"
    )
    valid = pop_grid.valid_mask()
    pixel_cells = _cell_ids(lat_grid.ravel(), lon_grid.ravel(), bounds, side_m)
    pixel_cells = np.where(valid.ravel(), pixel_cells, -1)

    occupied: set[int] = set()
    if registry:
        place_lats = np.array([p.location.lat for p in registry])
        place_lons = np.array([p.location.lon for p in registry])
        occupied = {int(c) for c in _cell_ids(place_lats, place_lons, bounds, side_m)}

    flat_values = pop_grid.values.ravel()
    members = np.flatnonzero(pixel_cells >= 0)
    # group pixels by cell; within a cell the largest value (then lowest index) first
    order = np.lexsort((members, -flat_values[members], pixel_cells[members]))
    members = members[order]
    cells, starts = np.unique(pixel_cells[members], return_index=True)
    ends = np.append(starts[1:], members.size)

    places: list[PopulatedPlace] = []
    for cell, start, end in zip(cells, starts, ends):
        if int(cell) in occupied:
            continue
        total = math.fsum(flat_values[members[start:end]].tolist())
        if not total > min_population:
            continue
        row, col = divmod(int(members[start]), pop_grid.ncols)
        places.append(
            PopulatedPlace(
                place_id=f"{id_prefix}{len(places):06d}",
                source=PlaceSource.raster,
                location=GeoPoint(
                    float(pop_grid.row_centers()[row]), float(pop_grid.col_centers()[col])
                ),
            )
        )

    logger.info(f"Extracted {len(places)} unlisted places from population grid")
    return places


def attach_populations(
    registry: Sequence[PopulatedPlace],
    pop_grid: RasterGrid,
    windows: Sequence[WindowSpec] = DEFAULT_WINDOWS,
) -> list[PopulatedPlace]:
    """Return the registry with window population sums attached to every place."""
    extent = pop_grid.extent
    result = []
    flagged = 0
    for place in registry:
        sums: list[Optional[float]] = []
        inside = extent.contains(place.location.lat, place.location.lon)
        for w in windows:
            if not inside:
                sums.append(None)
                continue
            try:
                sums.append(window_sum(pop_grid, place.location, w).total)
            except WindowOutOfGridError:
                sums.append(None)
        flags = place.flags
        if any(s is None for s in sums):
            flagged += 1
            if FLAG_POP_NODATA not in flags:
                flags = (*flags, FLAG_POP_NODATA)
        result.append(
            replace(place, pop_1p6=sums[0], pop_5=sums[1], pop_10=sums[2], flags=flags)
        )
    if flagged:
        logger.warning(f"{flagged} places lie outside the population grid")
    return result


def build_registry(
    list_a: Sequence[PopulatedPlace],
    list_b: Sequence[PopulatedPlace],
    pop_grid: Optional[RasterGrid],
    id_prefix: str = "R",
) -> list[PopulatedPlace]:
    """Merge the lists, add raster-derived places and attach populations."""
    registry = merge_places(list_a, list_b)
    if pop_grid is None:
        return registry
    registry = registry + extract_raster_places(pop_grid, registry, id_prefix=id_prefix)
    return attach_populations(registry, pop_grid)


def _optional_text(value: object) -> Optional[str]:
    text = str(value).strip() if value is not None else ""
    return text or None


def _optional_float(value: object) -> Optional[float]:
    text = _optional_text(value)
    return float(text) if text is not None else None


def read_place_list(path: Path, source: PlaceSource) -> list[PopulatedPlace]:
    """
    Read a source place list (``place_id,name,lat,lon,admin1,admin2``).

    When a ``place`` column is present, only settlement tags are kept.
    """
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    absent = sorted({"place_id", "lat", "lon"} - set(frame.columns))
    if absent:
        raise PlaceError(f"{path}: missing columns {', '.join(absent)}")
    if "place" in frame.columns:
        keep = frame["place"].str.strip().isin(SETTLEMENT_TAGS)
        dropped = int((~keep).sum())
        if dropped:
            logger.warning(f"{path}: dropped {dropped} non-settlement rows")
        frame = frame[keep]

    places = []
    for row in frame.to_dict(orient="records"):
        name = _optional_text(row.get("name"))
        places.append(
            PopulatedPlace(
                place_id=str(row["place_id"]),
                source=source,
                location=GeoPoint(float(row["lat"]), float(row["lon"])),
                names=(name,) if name else (),
                admin1=_optional_text(row.get("admin1")),
                admin2=_optional_text(row.get("admin2")),
            )
        )
    logger.info(f"Read {len(places)} {source.value} places from {path}")
    return places


def read_registry(path: Path) -> list[PopulatedPlace]:
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    absent = sorted(set(REGISTRY_COLUMNS) - set(frame.columns))
    if absent:
        raise PlaceError(f"{path}: missing registry columns {', '.join(absent)}")
    places = []
    for row in frame.to_dict(orient="records"):
        name = _optional_text(row["name"])
        pops = [_optional_float(row[c]) for c in ("pop_1p6", "pop_5", "pop_10")]
        places.append(
            PopulatedPlace(
                place_id=str(row["place_id"]),
                source=PlaceSource(row["source"]),
                location=GeoPoint(float(row["lat"]), float(row["lon"])),
                names=tuple(name.split(NAME_SEPARATOR)) if name else (),
                admin1=_optional_text(row["admin1"]),
                admin2=_optional_text(row["admin2"]),
                pop_1p6=pops[0],
                pop_5=pops[1],
                pop_10=pops[2],
                flags=(FLAG_POP_NODATA,) if any(p is None for p in pops) else (),
            )
        )
    return places


def write_registry(registry: Iterable[PopulatedPlace], path: Path) -> None:
    rows = [
        {
            "place_id": p.place_id,
            "source": p.source.value,
            "name": NAME_SEPARATOR.join(p.names),
            "lat": p.location.lat,
            "lon": p.location.lon,
            "admin1": p.admin1 or "",
            "admin2": p.admin2 or "",
            "pop_1p6": p.pop_1p6,
            "pop_5": p.pop_5,
            "pop_10": p.pop_10,
        }
        for p in registry
    ]
    frame = pd.DataFrame(rows, columns=list(REGISTRY_COLUMNS))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, encoding="utf-8")
