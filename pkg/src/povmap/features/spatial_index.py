"""
Nearest-neighbor indexes over points and road segments.

Both indexes use a k-d tree as a candidate filter and then rank candidates
with the same distance function a brute-force scan would use, so results equal
the O(n) scan exactly. Ties resolve to the lowest item index.
"""

from collections.abc import Sequence

import numpy as np
import numpy.typing as npt
from scipy.spatial import cKDTree

from povmap.errors import DataError
from povmap.features.layers import Way
from povmap.geo import (
    GeoPoint,
    chord_for_arc,
    haversine_array,
    local_xy,
    unit_vectors,
)

FloatArray = npt.NDArray[np.float64]

# relative slack on candidate radii; covers float error in the chord metric
_RADIUS_SLACK = 1e-7
# extra radius for segment candidates; covers planar vs great-circle mismatch
_SEGMENT_SLACK = 1.01
_SEGMENT_SLACK_M = 1.0


class EmptyIndexError(DataError):
    """Raised when querying an index built from no items."""

    pass


def _pick(distances: FloatArray, ids: npt.NDArray[np.intp]) -> tuple[int, float]:
    best = float(distances.min())
    winner = int(ids[distances == best].min())
    return winner, best


class PointIndex:
    """Great-circle nearest neighbor over a fixed set of points."""

    def __init__(self, lats: Sequence[float], lons: Sequence[float]) -> None:
        self.lats = np.asarray(lats, dtype=np.float64)
        self.lons = np.asarray(lons, dtype=np.float64)
        self._tree = cKDTree(unit_vectors(self.lats, self.lons)) if len(self) else None

    @classmethod
    def from_points(cls, points: Sequence[GeoPoint]) -> "PointIndex":
        return cls([p.lat for p in points], [p.lon for p in points])

    def __len__(self) -> int:
        return int(self.lats.size)

    def nearest(self, q: GeoPoint) -> tuple[int, float]:
        """Index of the nearest point and its distance in meters."""
        if self._tree is None:
            raise EmptyIndexError("nearest() on an empty point index")
        xyz = unit_vectors(np.array([q.lat]), np.array([q.lon]))[0]
        chord, _ = self._tree.query(xyz, k=1)
        radius = float(chord) * (1.0 + _RADIUS_SLACK) + 1e-12
        ids = np.array(sorted(self._tree.query_ball_point(xyz, r=radius)), dtype=np.intp)
        distances = haversine_array(q.lat, q.lon, self.lats[ids], self.lons[ids])
        return _pick(distances, ids)

    def within(self, q: GeoPoint, meters: float) -> npt.NDArray[np.intp]:
        """Sorted indexes of all points at great-circle distance <= ``meters``."""
        if self._tree is None:
            return np.zeros(0, dtype=np.intp)
        xyz = unit_vectors(np.array([q.lat]), np.array([q.lon]))[0]
        radius = chord_for_arc(meters) * (1.0 + _RADIUS_SLACK) + 1e-12
        ids = np.array(sorted(self._tree.query_ball_point(xyz, r=radius)), dtype=np.intp)
        if ids.size == 0:
            return ids
        distances = haversine_array(q.lat, q.lon, self.lats[ids], self.lons[ids])
        return ids[distances <= meters]

    def count_within(self, south: float, west: float, north: float, east: float) -> int:
        inside = (
            (self.lats >= south)
            & (self.lats <= north)
            & (self.lons >= west)
            & (self.lons <= east)
        )
        return int(np.count_nonzero(inside))


def segment_distances(q: GeoPoint, segments: FloatArray) -> FloatArray:
    """
    Point-to-segment distances in meters on the tangent plane at ``q``.

    ``segments`` has columns (lat1, lon1, lat2, lon2).
    """
    a = local_xy(q, segments[:, 0], segments[:, 1])
    b = local_xy(q, segments[:, 2], segments[:, 3])
    ab = b - a
    length2 = np.einsum("ij,ij->i", ab, ab)
    t = np.zeros(len(segments))
    nonzero = length2 > 0
    t[nonzero] = np.clip(
        -np.einsum("ij,ij->i", a[nonzero], ab[nonzero]) / length2[nonzero], 0.0, 1.0
    )
    closest = a + t[:, None] * ab
    result: FloatArray = np.hypot(closest[:, 0], closest[:, 1])
    return result


class SegmentIndex:
    """Nearest road segment to a query point; items are way indexes."""

    def __init__(self, segments: FloatArray, owners: Sequence[int]) -> None:
        self.segments = np.asarray(segments, dtype=np.float64).reshape(-1, 4)
        self.owners = np.asarray(owners, dtype=np.intp)
        if len(self.segments) == 0:
            self._tree = None
            self._max_half_m = 0.0
            return
        mid_lat = (self.segments[:, 0] + self.segments[:, 2]) / 2.0
        mid_lon = (self.segments[:, 1] + self.segments[:, 3]) / 2.0
        self._tree = cKDTree(unit_vectors(mid_lat, mid_lon))
        lengths = haversine_array(
            self.segments[:, 0], self.segments[:, 1], self.segments[:, 2], self.segments[:, 3]
        )
        self._max_half_m = float(lengths.max()) / 2.0

    @classmethod
    def from_ways(cls, ways: Sequence[Way]) -> "SegmentIndex":
        rows: list[tuple[float, float, float, float]] = []
        owners: list[int] = []
        for i, way in enumerate(ways):
            for a, b in zip(way.points, way.points[1:]):
                rows.append((a.lat, a.lon, b.lat, b.lon))
                owners.append(i)
        return cls(np.array(rows, dtype=np.float64), owners)

    def __len__(self) -> int:
        return len(self.segments)

    def nearest(self, q: GeoPoint) -> tuple[int, float]:
        """Owning way index of the nearest segment and its distance in meters."""
        if self._tree is None:
            raise EmptyIndexError("nearest() on an empty segment index")
        xyz = unit_vectors(np.array([q.lat]), np.array([q.lon]))[0]
        _, first = self._tree.query(xyz, k=1)
        d0 = float(segment_distances(q, self.segments[int(first) : int(first) + 1])[0])
        reach = (d0 + self._max_half_m) * _SEGMENT_SLACK + _SEGMENT_SLACK_M
        ids = np.array(
            sorted(self._tree.query_ball_point(xyz, r=chord_for_arc(reach))), dtype=np.intp
        )
        distances = segment_distances(q, self.segments[ids])
        segment, best = _pick(distances, ids)
        return int(self.owners[segment]), best
