"""
Geodesy primitives on a spherical Earth: distances, cell windows and the
map-tile ground resolution formula.
"""

import math
import numbers
from dataclasses import dataclass, field

import numpy as np
import numpy.typing as npt

from povmap.errors import DataError

EARTH_RADIUS_M: float = 6_371_000.0
METERS_PER_DEGREE: float = math.pi / 180.0 * EARTH_RADIUS_M
WINDOW_SIDES_KM: tuple[float, ...] = (1.6, 5.0, 10.0)
MAX_WINDOW_LAT: float = 85.0
MAX_ZOOM: int = 22
TILE_EQUATOR_M_PER_PX: float = 156_543.0

FloatArray = npt.NDArray[np.float64]


class GeoError(DataError):
    """Raised for invalid coordinates, zoom levels or windows."""

    pass


@dataclass(frozen=True, order=True)
class GeoPoint:
    """A WGS-84 coordinate in degrees."""

    lat: float
    lon: float

    def __post_init__(self) -> None:
        if math.isnan(self.lat) or math.isnan(self.lon):
            raise GeoError("GeoPoint coordinates must not be NaN")
        if not -90.0 <= self.lat <= 90.0:
            raise GeoError(f"Latitude {self.lat} outside [-90, 90]")
        if not -180.0 <= self.lon <= 180.0:
            raise GeoError(f"Longitude {self.lon} outside [-180, 180]")


@dataclass(frozen=True)
class WindowSpec:
    """Side length of a square analysis window around a place."""

    side_km: float
    strict: bool = field(default=True, compare=False)

    def __post_init__(self) -> None:
        if not self.side_km > 0:
            raise GeoError(f"Window side must be positive, got {self.side_km}")
        if self.strict and self.side_km not in WINDOW_SIDES_KM:
            raise GeoError(
                f"Window side {self.side_km} km not in {WINDOW_SIDES_KM}; "
                "pass strict=False to override"
            )

    @property
    def side_m(self) -> float:
        return self.side_km * 1000.0

    @property
    def label(self) -> str:
        """Column-safe name, e.g. ``1p6`` for 1.6 km."""
        text = f"{self.side_km:g}"
        return text.replace(".", "p")


DEFAULT_WINDOWS: tuple[WindowSpec, ...] = tuple(WindowSpec(s) for s in WINDOW_SIDES_KM)
CELL_WINDOW = DEFAULT_WINDOWS[0]


@dataclass(frozen=True)
class BBox:
    """Axis-aligned lat/lon box, edges inclusive."""

    south: float
    west: float
    north: float
    east: float

    def contains(self, lat: float, lon: float) -> bool:
        return self.south <= lat <= self.north and self.west <= lon <= self.east

    def contains_array(self, lats: FloatArray, lons: FloatArray) -> npt.NDArray[np.bool_]:
        return (
            (lats >= self.south)
            & (lats <= self.north)
            & (lons >= self.west)
            & (lons <= self.east)
        )

    def intersects(self, other: "BBox") -> bool:
        return not (
            other.west > self.east
            or other.east < self.west
            or other.south > self.north
            or other.north < self.south
        )


def haversine_m(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance between two points in meters."""
    if a == b:
        return 0.0
    phi1 = math.radians(a.lat)
    phi2 = math.radians(b.lat)
    dphi = phi2 - phi1
    dlmb = math.radians(b.lon - a.lon)
    h = (
        math.sin(dphi / 2.0) ** 2
        + math.cos(phi1) * math.cos(phi2) * math.sin(dlmb / 2.0) ** 2
    )
    return 2.0 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(h)))


def haversine_array(
    lat: float | FloatArray, lon: float | FloatArray, lats: FloatArray, lons: FloatArray
) -> FloatArray:
    """Vectorised great-circle distances in meters; one-to-many or pairwise."""
    phi1 = np.radians(lat)
    phi2 = np.radians(lats)
    dphi = phi2 - phi1
    dlmb = np.radians(lons - lon)
    h = np.sin(dphi / 2.0) ** 2 + np.cos(phi1) * np.cos(phi2) * np.sin(dlmb / 2.0) ** 2
    result: FloatArray = 2.0 * EARTH_RADIUS_M * np.arcsin(np.minimum(1.0, np.sqrt(h)))
    return result


def initial_bearing_deg(origin: GeoPoint, lats: FloatArray, lons: FloatArray) -> FloatArray:
    """Initial great-circle bearing from origin to each target, in [0, 360)."""
    phi1 = math.radians(origin.lat)
    phi2 = np.radians(lats)
    dlmb = np.radians(lons - origin.lon)
    y = np.sin(dlmb) * np.cos(phi2)
    x = math.cos(phi1) * np.sin(phi2) - math.sin(phi1) * np.cos(phi2) * np.cos(dlmb)
    bearing: FloatArray = np.mod(np.degrees(np.arctan2(y, x)), 360.0)
    return bearing


def meters_per_pixel(lat: float, zoom: int) -> float:
    """Ground resolution of a web-map tile pixel at the given latitude and zoom."""
    if (
        isinstance(zoom, bool)
        or not isinstance(zoom, numbers.Integral)
        or not 0 <= zoom <= MAX_ZOOM
    ):
        raise GeoError(f"Zoom must be an integer in [0, {MAX_ZOOM}], got {zoom!r}")
    return TILE_EQUATOR_M_PER_PX * math.cos(lat * math.pi / 180.0) / 2**zoom


def cell_window(center: GeoPoint, w: WindowSpec) -> BBox:
    """Lat/lon box spanning ``w.side_km`` in both directions around ``center``."""
    if abs(center.lat) >= MAX_WINDOW_LAT:
        raise GeoError(f"Window center latitude {center.lat} too close to a pole")
    half_lat = w.side_m / 2.0 / METERS_PER_DEGREE
    half_lon = half_lat / math.cos(math.radians(center.lat))
    return BBox(
        south=center.lat - half_lat,
        west=center.lon - half_lon,
        north=center.lat + half_lat,
        east=center.lon + half_lon,
    )


def local_xy(origin: GeoPoint, lats: FloatArray, lons: FloatArray) -> FloatArray:
    """
    Project points onto a local tangent plane at ``origin`` (equirectangular).

    Returns an (n, 2) array of east/north offsets in meters.
    """
    scale = math.cos(math.radians(origin.lat))
    x = np.radians(lons - origin.lon) * EARTH_RADIUS_M * scale
    y = np.radians(lats - origin.lat) * EARTH_RADIUS_M
    return np.column_stack([x, y])


def unit_vectors(lats: FloatArray, lons: FloatArray) -> FloatArray:
    """Points on the unit sphere; chord length is monotone in great-circle distance."""
    phi = np.radians(lats)
    lmb = np.radians(lons)
    return np.column_stack(
        [np.cos(phi) * np.cos(lmb), np.cos(phi) * np.sin(lmb), np.sin(phi)]
    )


def chord_for_arc(meters: float) -> float:
    """Unit-sphere chord length corresponding to a great-circle distance."""
    angle = min(math.pi, meters / EARTH_RADIUS_M)
    return 2.0 * math.sin(angle / 2.0)
