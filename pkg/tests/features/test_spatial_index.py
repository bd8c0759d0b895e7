import numpy as np
import pytest

from povmap.features.layers import Way
from povmap.features.spatial_index import (
    EmptyIndexError,
    PointIndex,
    SegmentIndex,
    segment_distances,
)
from povmap.geo import GeoPoint, haversine_array


def _random_points(rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
    return rng.uniform(-1.0, 1.0, size=n), rng.uniform(30.0, 32.0, size=n)


def test_single_point_is_its_own_nearest() -> None:
    index = PointIndex([0.5], [31.0])
    assert index.nearest(GeoPoint(0.5, 31.0)) == (0, 0.0)
    item, dist = index.nearest(GeoPoint(0.0, 30.0))
    assert item == 0
    assert dist > 0


def test_point_index_matches_brute_force() -> None:
    rng = np.random.default_rng(42)
    lats, lons = _random_points(rng, 1000)
    index = PointIndex(lats, lons)
    q_lats, q_lons = _random_points(rng, 100)
    for lat, lon in zip(q_lats, q_lons):
        distances = haversine_array(float(lat), float(lon), lats, lons)
        item, dist = index.nearest(GeoPoint(float(lat), float(lon)))
        assert item == int(np.argmin(distances))
        assert dist == pytest.approx(float(distances.min()), rel=1e-6)


def test_within_matches_brute_force() -> None:
    rng = np.random.default_rng(8)
    lats, lons = _random_points(rng, 1000)
    index = PointIndex(lats, lons)
    for lat, lon in zip(*_random_points(rng, 50)):
        q = GeoPoint(float(lat), float(lon))
        distances = haversine_array(q.lat, q.lon, lats, lons)
        expected = np.flatnonzero(distances <= 20_000.0)
        np.testing.assert_array_equal(index.within(q, 20_000.0), expected)


def test_ties_resolve_to_lowest_index() -> None:
    index = PointIndex([0.0, 0.1, 0.0], [30.0, 30.0, 30.0])
    assert index.nearest(GeoPoint(0.0, 30.0)) == (0, 0.0)


def test_empty_indexes() -> None:
    with pytest.raises(EmptyIndexError):
        PointIndex([], []).nearest(GeoPoint(0.0, 0.0))
    assert PointIndex([], []).within(GeoPoint(0.0, 0.0), 100.0).size == 0
    with pytest.raises(EmptyIndexError):
        SegmentIndex.from_ways([]).nearest(GeoPoint(0.0, 0.0))


def test_segment_index_matches_brute_force() -> None:
    rng = np.random.default_rng(17)
    ways = []
    for i in range(150):
        n = int(rng.integers(2, 6))
        start = rng.uniform([-0.5, 30.0], [0.5, 31.0])
        steps = rng.normal(0.0, 0.01, size=(n - 1, 2))
        coords = np.vstack([start, start + np.cumsum(steps, axis=0)])
        points = tuple(GeoPoint(float(a), float(o)) for a, o in coords)
        ways.append(Way(f"w{i}", points, "secondary"))
    index = SegmentIndex.from_ways(ways)
    for lat, lon in zip(rng.uniform(-0.6, 0.6, 100), rng.uniform(29.9, 31.1, 100)):
        q = GeoPoint(float(lat), float(lon))
        distances = segment_distances(q, index.segments)
        best = float(distances.min())
        expected = int(index.owners[int(np.flatnonzero(distances == best).min())])
        assert index.nearest(q) == (expected, best)


def test_point_on_a_road_has_zero_distance() -> None:
    way = Way("w", (GeoPoint(0.0, 30.0), GeoPoint(0.01, 30.0)), "primary")
    _, dist = SegmentIndex.from_ways([way]).nearest(GeoPoint(0.005, 30.0))
    assert dist == pytest.approx(0.0, abs=1e-6)


def test_count_within_box() -> None:
    index = PointIndex([0.0, 0.5, 1.0, 2.0], [0.0, 0.5, 1.0, 2.0])
    assert index.count_within(0.0, 0.0, 1.0, 1.0) == 3
