from pathlib import Path

import numpy as np
import pytest
from conftest import make_grid, make_place

from povmap.features.extract import (
    BASE_COLUMNS,
    DISTANCE_CAP_M,
    FEATURE_COLUMNS,
    IMAGE_COLUMNS,
    FeatureError,
    FeatureExtractor,
    FeatureTable,
    build_feature_vector,
    poi_stats,
    road_stats,
)
from povmap.features.layers import POI_CATEGORIES, LayerSet, Poi, Surface, Way, make_building
from povmap.geo import CELL_WINDOW, METERS_PER_DEGREE, GeoPoint, cell_window, haversine_m
from povmap.rasters import RasterGrid
from povmap.synth import SynthWorld

CENTER = GeoPoint(0.0, 30.0)


def _deg(meters: float) -> float:
    return meters / METERS_PER_DEGREE


def _zero_grids() -> tuple[RasterGrid, RasterGrid]:
    grid = make_grid(np.zeros((200, 200)), xll=29.9, yll=-0.1, cellsize=0.001)
    return grid, grid


def test_empty_layers_and_zero_grids() -> None:
    vector = build_feature_vector(make_place("p", 0.0, 30.0), LayerSet(), _zero_grids())
    for column, value in vector.as_dict().items():
        if column.startswith("dist_") or column.endswith("_dist"):
            assert value == DISTANCE_CAP_M, column
        elif column.startswith("lum_zero_ratio"):
            assert value == 1.0, column
        else:
            assert value == 0.0, column
    assert vector.flags == ()


def test_hand_computed_fixture() -> None:
    road = Way(
        "r1",
        (GeoPoint(-_deg(500), 30.0), GeoPoint(_deg(500), 30.0)),
        "primary",
        Surface.paved,
    )
    far_road = Way("r2", (GeoPoint(0.2, 30.2), GeoPoint(0.21, 30.2)), "secondary")
    school = Poi("s1", CENTER, "school")
    hospital = Poi("h1", GeoPoint(0.0, 30.0 + _deg(2000)), "hospital")
    house = make_building(
        "b1",
        [
            GeoPoint(0.001, 30.001),
            GeoPoint(0.001, 30.0011),
            GeoPoint(0.0011, 30.0011),
            GeoPoint(0.0011, 30.001),
        ],
    )
    layers = LayerSet(ways=(road, far_road), pois=(school, hospital), buildings=(house,))
    vector = build_feature_vector(make_place("p", 0.0, 30.0), layers, _zero_grids())

    assert vector["road_length_total"] == pytest.approx(1000.0, abs=1.0)
    assert vector["road_length_paved"] == vector["road_length_total"]
    assert vector["road_length_unpaved"] == 0.0
    assert vector["dist_nearest_road"] == pytest.approx(0.0, abs=1e-6)
    assert vector["junction_count"] == 0.0
    assert vector["dist_nearest_junction"] == DISTANCE_CAP_M
    assert vector["building_count"] == 1.0
    assert vector["building_area_m2"] == house.area_m2
    assert vector["poi_school_count"] == 1.0
    assert vector["poi_school_dist"] == 0.0
    assert vector["poi_hospital_count"] == 0.0
    assert vector["poi_hospital_dist"] == pytest.approx(2000.0, rel=1e-9)
    assert vector["poi_bank_dist"] == DISTANCE_CAP_M


def test_road_lengths_are_clipped_to_the_cell() -> None:
    cell = cell_window(CENTER, CELL_WINDOW)
    crossing = Way("a", (CENTER, GeoPoint(_deg(1600), 30.0)), "primary", Surface.unpaved)
    outside = Way("b", (GeoPoint(0.5, 30.5), GeoPoint(0.6, 30.5)), "primary")
    stats = road_stats([crossing, outside], cell)
    assert stats.total == pytest.approx(800.0, abs=1.0)
    assert stats.unpaved == stats.total
    assert road_stats([outside], cell).total == 0.0


def test_poi_stats_match_brute_force() -> None:
    rng = np.random.default_rng(31)
    pois = [
        Poi(
            f"p{i}",
            GeoPoint(float(rng.uniform(-0.05, 0.05)), float(rng.uniform(29.95, 30.05))),
            str(rng.choice(POI_CATEGORIES[:6])),
        )
        for i in range(300)
    ]
    cell = cell_window(CENTER, CELL_WINDOW)
    stats = poi_stats(pois, cell, CENTER)
    for category, stat in zip(POI_CATEGORIES, stats):
        members = [p for p in pois if p.category == category]
        if not members:
            assert (stat.count, stat.dist_m) == (0, DISTANCE_CAP_M)
            continue
        inside = [p for p in members if cell.contains(p.location.lat, p.location.lon)]
        assert stat.count == len(inside)
        assert stat.dist_m == pytest.approx(
            min(haversine_m(CENTER, p.location) for p in members), rel=1e-9
        )


def test_image_probabilities_fill_the_last_columns() -> None:
    extractor = FeatureExtractor(LayerSet(), *_zero_grids())
    vector = extractor.vector(make_place("p", 0.0, 30.0), [0.1, 0.2, 0.3, 0.4])
    assert vector.values[len(BASE_COLUMNS) :] == (0.1, 0.2, 0.3, 0.4)
    with pytest.raises(FeatureError):
        extractor.vector(make_place("p", 0.0, 30.0), [1.0])


def test_place_outside_the_grids_is_flagged() -> None:
    grid = make_grid(np.ones((5, 5)), xll=10.0, yll=10.0, cellsize=0.001)
    vector = build_feature_vector(make_place("p", 0.0, 30.0), LayerSet(), (grid, grid))
    assert "lum_1p6_empty" in vector.flags
    assert "pop_10_out_of_grid" in vector.flags


def test_extraction_is_deterministic(small_world: SynthWorld, tmp_path: Path) -> None:
    country = small_world.countries[0]
    places = country.list_a[:6]
    first = FeatureExtractor(country.layers, country.luminosity, country.population)
    second = FeatureExtractor(country.layers, country.luminosity, country.population)
    table = first.table(places)
    assert table == second.table(list(places))
    assert table.matrix.shape == (6, len(FEATURE_COLUMNS))
    assert np.isfinite(table.matrix).all()

    path = tmp_path / "features.csv"
    table.to_csv(path)
    assert FeatureTable.from_csv(path) == table


def test_feature_table_helpers() -> None:
    width = len(FEATURE_COLUMNS)
    a = FeatureTable(place_ids=("x", "y"), matrix=np.arange(2 * width, dtype=float).reshape(2, -1))
    b = FeatureTable(place_ids=("z",), matrix=np.ones((1, width)))
    joined = FeatureTable.concat([a, b])
    assert joined.place_ids == ("x", "y", "z")
    np.testing.assert_array_equal(joined.rows(["z"]), b.matrix)

    filled = joined.with_image_probs({"y": [0.25, 0.25, 0.25, 0.25]})
    np.testing.assert_array_equal(filled.rows(["y"])[0, -len(IMAGE_COLUMNS) :], [0.25] * 4)
    np.testing.assert_array_equal(filled.rows(["x"]), a.rows(["x"]))

    with pytest.raises(FeatureError, match="Duplicate"):
        FeatureTable.concat([a, a])
