from pathlib import Path

import numpy as np
import pytest
from conftest import make_grid, make_place

from povmap.geo import METERS_PER_DEGREE, WindowSpec, cell_window
from povmap.places import (
    FLAG_POP_NODATA,
    PlaceError,
    PlaceSource,
    PopulatedPlace,
    attach_populations,
    build_registry,
    extract_raster_places,
    merge_places,
    read_place_list,
    read_registry,
    write_registry,
)


def _north_of(km: float) -> float:
    return km * 1000.0 / METERS_PER_DEGREE


def test_places_closer_than_one_km_merge() -> None:
    a = make_place("a1", 0.0, 30.0, name="Alpha")
    b = make_place("b1", _north_of(0.9), 30.0, PlaceSource.list_b, name="Alfa")
    (merged,) = merge_places([a], [b])
    assert merged.place_id == "a1"
    assert merged.location == a.location
    assert merged.names == ("Alpha", "Alfa")


def test_places_farther_than_one_km_stay_apart() -> None:
    a = make_place("a1", 0.0, 30.0)
    b = make_place("b1", _north_of(1.2), 30.0, PlaceSource.list_b)
    assert [p.place_id for p in merge_places([a], [b])] == ["a1", "b1"]


def test_chain_merge_is_greedy() -> None:
    a = make_place("a1", 0.0, 30.0)
    b = make_place("b1", _north_of(0.9), 30.0, PlaceSource.list_b)
    c = make_place("b2", _north_of(1.8), 30.0, PlaceSource.list_b)
    assert [p.place_id for p in merge_places([a], [b, c])] == ["a1", "b2"]


def test_nearest_accepted_record_wins() -> None:
    a = make_place("a1", 0.0, 30.0)
    a2 = make_place("a2", _north_of(1.5), 30.0)
    b = make_place("b1", _north_of(0.8), 30.0, PlaceSource.list_b, name="Between")
    merged = merge_places([a, a2], [b])
    assert [p.names for p in merged] == [(), ("Between",)]


def test_merge_is_idempotent() -> None:
    rng = np.random.default_rng(5)
    places = [
        make_place(f"p{i}", float(lat), float(lon), name=f"n{i}")
        for i, (lat, lon) in enumerate(zip(rng.uniform(0, 0.2, 40), rng.uniform(30, 30.2, 40)))
    ]
    registry = merge_places(places, [])
    assert len(registry) <= len(places)
    assert merge_places(registry, []) == registry
    assert merge_places(registry, registry) == registry


def test_duplicate_ids_are_rejected() -> None:
    a = make_place("x", 0.0, 30.0)
    b = make_place("x", 1.0, 30.0, PlaceSource.list_b)
    with pytest.raises(PlaceError, match="Duplicate"):
        merge_places([a], [b])


def _population(peak: float) -> np.ndarray:
    values = np.zeros((20, 20))
    values[10, 5] = peak
    return values


def test_unlisted_populated_cell_becomes_place() -> None:
    grid = make_grid(_population(150.0), cellsize=0.001)
    (place,) = extract_raster_places(grid, [], id_prefix="AA-R")
    assert place.source is PlaceSource.raster
    assert place.place_id == "AA-R000000"
    assert place.location.lat == pytest.approx(0.0095)
    assert place.location.lon == pytest.approx(0.0055)


def test_cell_below_threshold_yields_nothing() -> None:
    grid = make_grid(_population(80.0), cellsize=0.001)
    assert extract_raster_places(grid, []) == []


def test_cell_holding_a_registry_place_yields_nothing() -> None:
    grid = make_grid(_population(500.0), cellsize=0.001)
    listed = make_place("a1", 0.0095, 0.0055)
    assert extract_raster_places(grid, [listed]) == []


def test_uniform_grid_population_counts_pixels() -> None:
    grid = make_grid(np.ones((200, 200)), xll=30.0, yll=0.0, cellsize=0.0003)
    place = make_place("a1", 0.03, 30.03)
    (attached,) = attach_populations([place], grid)
    lats = grid.row_centers()
    lons = grid.col_centers()
    for value, km in zip(attached.populations(), (1.6, 5.0, 10.0)):
        box = cell_window(place.location, WindowSpec(km))
        expected = sum(1 for lat in lats for lon in lons if box.contains(lat, lon))
        assert value == expected
    assert attached.flags == ()


def test_zero_grid_gives_zero_populations() -> None:
    grid = make_grid(np.zeros((50, 50)), cellsize=0.001)
    (attached,) = attach_populations([make_place("a1", 0.025, 0.025)], grid)
    assert attached.populations() == (0.0, 0.0, 0.0)


def test_place_outside_grid_is_flagged() -> None:
    grid = make_grid(np.ones((5, 5)), cellsize=0.001)
    (attached,) = attach_populations([make_place("far", 3.0, 3.0)], grid)
    assert attached.populations() == (None, None, None)
    assert FLAG_POP_NODATA in attached.flags


def test_build_registry_without_grid_only_merges() -> None:
    a = make_place("a1", 0.0, 30.0)
    b = make_place("b1", 0.0, 30.0, PlaceSource.list_b)
    assert build_registry([a], [b], None) == [a]


def test_negative_population_rejected() -> None:
    with pytest.raises(PlaceError):
        PopulatedPlace("a", PlaceSource.list_a, make_place("a", 0, 0).location, pop_5=-1.0)


def test_registry_file_round_trip(tmp_path: Path) -> None:
    registry = [
        PopulatedPlace(
            "a1",
            PlaceSource.list_a,
            make_place("a1", 1.25, 30.5).location,
            names=("Alpha", "Alfa"),
            admin1="North",
            pop_1p6=12.5,
            pop_5=40.0,
            pop_10=91.0,
        ),
        PopulatedPlace(
            "R000001",
            PlaceSource.raster,
            make_place("R000001", -0.5, 29.75).location,
            pop_1p6=101.0,
            pop_5=300.0,
            pop_10=1200.0,
        ),
    ]
    path = tmp_path / "registry.csv"
    write_registry(registry, path)
    assert read_registry(path) == registry


def test_read_place_list_keeps_settlements_only(tmp_path: Path) -> None:
    path = tmp_path / "list_b.csv"
    path.write_text(
        "place_id,name,lat,lon,place\n"
        "n1,Kisumu,-0.1,34.7,city\n"
        "n2,Somewhere,-0.2,34.8,locality\n"
        "n3,,-0.3,34.9,hamlet\n"
    )
    places = read_place_list(path, PlaceSource.list_b)
    assert [p.place_id for p in places] == ["n1", "n3"]
    assert places[0].name == "Kisumu"
    assert places[1].names == ()
    assert all(p.source is PlaceSource.list_b for p in places)
