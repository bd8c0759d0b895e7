from pathlib import Path

import numpy as np
import pytest
from conftest import NODATA, make_cluster, make_grid, make_place

from povmap.clusters import (
    CandidateSet,
    ClusterError,
    Provenance,
    WealthGroup,
    assign_all,
    assign_candidates,
    mean_prediction,
    narrow,
    read_clusters,
    tercile_thresholds,
    training_rows,
    write_clusters,
)
from povmap.features.extract import FEATURE_COLUMNS, FeatureTable
from povmap.geo import METERS_PER_DEGREE, GeoPoint, haversine_m, initial_bearing_deg
from povmap.synth import SynthWorld


def _north(km: float) -> float:
    return km * 1000.0 / METERS_PER_DEGREE


def _populated_grid(seed: int = 1) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.uniform(1.0, 100.0, size=(41, 41))


SIX = CandidateSet(cluster_id="c1", candidates=("p1", "p2", "p3", "p4", "p5", "p6"))
SIX_PREDICTIONS = {f"p{i}": 10.0 * i for i in range(1, 7)}


def test_urban_radius_is_two_km() -> None:
    cluster = make_cluster("c1", 0.0, 30.0, urban=True)
    near = make_place("near", _north(1.5), 30.0)
    far = make_place("far", _north(2.5), 30.0)
    grid = make_grid(np.ones((3, 3)), xll=29.99, yll=-0.01)
    cset = assign_candidates(cluster, [near, far], grid)
    assert cset.candidates == ("near",)
    assert cset.provenance is Provenance.radius


def test_rural_radius_is_five_km() -> None:
    cluster = make_cluster("c1", 0.0, 30.0, urban=False)
    edge = make_place("edge", _north(4.9), 30.0)
    outside = make_place("outside", -_north(5.3), 30.0)
    grid = make_grid(np.ones((3, 3)), xll=29.99, yll=-0.01)
    assert assign_candidates(cluster, [outside, edge], grid).candidates == ("edge",)


def test_quadrant_fallback_picks_most_populated_pixel_per_quadrant() -> None:
    cluster = make_cluster("c1", 0.0, 30.0, urban=False)
    values = _populated_grid()
    grid = make_grid(values, xll=29.8975, yll=-0.1025, cellsize=0.005)
    cset = assign_candidates(cluster, [make_place("distant", 1.0, 31.0)], grid)
    assert cset.provenance is Provenance.quadrant_fallback
    assert cset.candidates == ("c1:q0", "c1:q1", "c1:q2", "c1:q3")

    lats, lons = np.meshgrid(grid.row_centers(), grid.col_centers(), indexing="ij")
    origin = cluster.location
    bearings = initial_bearing_deg(origin, lats.ravel(), lons.ravel())
    for place in cset.fallback_places:
        k = int(place.place_id[-1])
        assert haversine_m(origin, place.location) <= 5000.0
        best = -1.0
        for flat, (lat, lon) in enumerate(zip(lats.ravel(), lons.ravel())):
            inside = haversine_m(origin, GeoPoint(float(lat), float(lon))) <= 5000.0
            if inside and int(bearings[flat] // 90.0) == k:
                best = max(best, float(values.ravel()[flat]))
        row = int(np.argmin(np.abs(grid.row_centers() - place.location.lat)))
        col = int(np.argmin(np.abs(grid.col_centers() - place.location.lon)))
        assert values[row, col] == best


def test_fallback_uses_nearest_valid_pixel_when_disk_is_empty() -> None:
    cluster = make_cluster("c1", 0.0, 30.0)
    values = np.full((10, 10), NODATA)
    values[0, 9] = 3.0
    grid = make_grid(values, xll=30.5, yll=0.5, cellsize=0.01)
    cset = assign_candidates(cluster, [], grid)
    (place,) = cset.fallback_places
    assert cset.candidates == ("c1:q0",)
    assert place.location.lat == pytest.approx(0.595)
    assert place.location.lon == pytest.approx(30.595)


def test_assign_all_reports_clusters_without_candidates() -> None:
    grid = make_grid(np.full((3, 3), NODATA))
    ok = make_cluster("ok", 0.0, 0.0)
    lonely = make_cluster("lonely", 1.0, 1.0)
    sets, failed = assign_all([ok, lonely], [make_place("p", 0.001, 0.001)], grid)
    assert list(sets) == ["ok"]
    assert list(failed) == ["lonely"]


def test_radius_rule_holds_on_synthetic_clusters(small_world: SynthWorld) -> None:
    for country in small_world.countries:
        truth = {p.place_id: p for p in country.places}
        for cluster in country.clusters:
            anchor = truth[country.anchors[cluster.cluster_id]]
            assert haversine_m(cluster.location, anchor.location) <= cluster.radius_m
            cset = assign_candidates(cluster, country.list_a, country.population)
            if not anchor.hidden:
                assert anchor.place_id in cset.candidates
            for pid in cset.candidates:
                if pid in truth:
                    assert haversine_m(cluster.location, truth[pid].location) <= cluster.radius_m


def test_narrow_hand_worked_example() -> None:
    assert tercile_thresholds(list(SIX_PREDICTIONS.values())) == pytest.approx(
        (80.0 / 3.0, 130.0 / 3.0)
    )
    richer = narrow(SIX, SIX_PREDICTIONS, 55.0)
    assert richer.narrowed == ("p5", "p6")
    assert richer.group is WealthGroup.richer
    poorer = narrow(SIX, SIX_PREDICTIONS, 5.0)
    assert poorer.narrowed == ("p1", "p2")
    middle = narrow(SIX, SIX_PREDICTIONS, 30.0)
    assert middle.narrowed == ("p3", "p4")


def test_narrow_is_idempotent_and_order_free() -> None:
    once = narrow(SIX, SIX_PREDICTIONS, 55.0)
    assert narrow(once, SIX_PREDICTIONS, 55.0) == once
    reversed_predictions = dict(reversed(list(SIX_PREDICTIONS.items())))
    assert narrow(SIX, reversed_predictions, 55.0) == once


def test_narrow_skips_fewer_than_three_candidates() -> None:
    pair = CandidateSet(cluster_id="c2", candidates=("a", "b"))
    result = narrow(pair, {"a": 1.0, "b": 2.0}, 90.0)
    assert result.narrowed == ("a", "b")
    assert result.narrowing_skipped


def test_narrow_falls_back_to_closest_candidate_when_group_is_empty() -> None:
    cset = CandidateSet(cluster_id="c3", candidates=("p1", "p2", "p3", "p4"))
    predictions = {"p1": 10.0, "p2": 10.0, "p3": 10.0, "p4": 50.0}
    result = narrow(cset, predictions, 5.0)
    assert result.group is WealthGroup.poorer
    assert result.narrowed == ("p1",)


def test_narrow_requires_predictions_for_every_candidate() -> None:
    with pytest.raises(ClusterError, match="p6"):
        narrow(SIX, {k: v for k, v in SIX_PREDICTIONS.items() if k != "p6"}, 50.0)


def test_narrowed_subset_must_lie_within_candidates() -> None:
    with pytest.raises(ClusterError):
        CandidateSet(cluster_id="c", candidates=("a",), narrowed=("b",))


def _table(vectors: dict[str, float]) -> FeatureTable:
    width = len(FEATURE_COLUMNS)
    matrix = np.array([np.full(width, v) for v in vectors.values()], dtype=np.float64)
    matrix[:, 0] = np.arange(len(vectors))
    return FeatureTable(place_ids=tuple(vectors), matrix=matrix)


def test_training_rows_average_active_candidates() -> None:
    features = _table({"v": 2.0, "w": 4.0, "u": 9.0})
    clusters = [
        make_cluster("one", 0.0, 0.0, iwi=40.0),
        make_cluster("two", 0.0, 0.0, iwi=50.0),
        make_cluster("narrowed", 0.0, 0.0, iwi=60.0),
    ]
    sets = {
        "one": CandidateSet(cluster_id="one", candidates=("v",)),
        "two": CandidateSet(cluster_id="two", candidates=("v", "w")),
        "narrowed": CandidateSet(
            cluster_id="narrowed", candidates=("u", "v", "w"), narrowed=("u", "w")
        ),
    }
    rows = training_rows(sets, features, clusters)
    assert rows.cluster_ids == ("one", "two", "narrowed")
    np.testing.assert_array_equal(rows.x[0], features.matrix[0])
    np.testing.assert_array_equal(rows.x[1], (features.matrix[0] + features.matrix[1]) / 2)
    assert rows.x[2, 1] == (9.0 + 4.0) / 2
    assert rows.x[2, 0] == (2.0 + 1.0) / 2
    np.testing.assert_array_equal(rows.y, [40.0, 50.0, 60.0])


def test_training_rows_exclude_clusters_with_missing_features() -> None:
    features = _table({"v": 1.0})
    clusters = [make_cluster("gap", 0.0, 0.0), make_cluster("none", 0.0, 0.0)]
    sets = {"gap": CandidateSet(cluster_id="gap", candidates=("v", "x"))}
    rows = training_rows(sets, features, clusters)
    assert len(rows) == 0
    assert rows.x.shape == (0, len(FEATURE_COLUMNS))
    assert set(rows.excluded) == {"gap", "none"}
    assert "x" in rows.excluded["gap"]


def test_mean_prediction_uses_all_candidates() -> None:
    narrowed = narrow(SIX, SIX_PREDICTIONS, 55.0)
    assert mean_prediction(narrowed, SIX_PREDICTIONS) == 35.0


def test_cluster_file_round_trip(tmp_path: Path) -> None:
    clusters = [
        make_cluster("c1", -1.25, 36.5, urban=True, iwi=61.5, country="KE"),
        make_cluster("c2", -1.5, 36.75, urban=False, iwi=12.0, country="KE"),
    ]
    path = tmp_path / "clusters.csv"
    write_clusters(clusters, path)
    assert read_clusters(path) == clusters


def test_read_clusters_rejects_unknown_urban_flag(tmp_path: Path) -> None:
    path = tmp_path / "clusters.csv"
    path.write_text("cluster_id,country,lat,lon,urban,iwi\nc1,KE,0,36,maybe,40\n")
    with pytest.raises(ClusterError, match="urban flag"):
        read_clusters(path)


def test_cluster_iwi_must_be_in_range() -> None:
    with pytest.raises(ClusterError):
        make_cluster("c1", 0.0, 0.0, iwi=101.0)
