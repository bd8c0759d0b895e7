from pathlib import Path
from typing import Optional

import numpy as np
import numpy.typing as npt
import pytest

from povmap.clusters import CandidateSet, SurveyCluster, assign_all
from povmap.features.extract import FeatureExtractor, FeatureTable
from povmap.geo import GeoPoint
from povmap.models.imgcls import Tile
from povmap.places import PlaceSource, PopulatedPlace
from povmap.rasters import RasterGrid
from povmap.refine import RefineData
from povmap.synth import SynthSpec, SynthWorld, generate

NODATA = -9999.0

# Small enough for a full refinement in test time, large enough for 3-fold
# splits inside every country.
SMALL_SPEC = SynthSpec(
    countries=3,
    places_per_country=14,
    hidden_places_per_country=2,
    clusters_per_country=10,
    span_deg=0.3,
    tile_size=16,
    seed=11,
)


@pytest.fixture(autouse=True)
def isolate_xdg(monkeypatch: pytest.MonkeyPatch, tmp_path: Path) -> None:
    # keep log files and config out of the real home directory
    monkeypatch.setenv("XDG_CONFIG_HOME", str(tmp_path / "config"))
    monkeypatch.setenv("XDG_DATA_HOME", str(tmp_path / "data"))


def make_grid(
    values: npt.ArrayLike,
    xll: float = 0.0,
    yll: float = 0.0,
    cellsize: float = 0.01,
    nodata: float = NODATA,
) -> RasterGrid:
    array = np.asarray(values, dtype=np.float64)
    return RasterGrid(
        ncols=array.shape[1],
        nrows=array.shape[0],
        xll=xll,
        yll=yll,
        cellsize=cellsize,
        nodata=nodata,
        values=array,
    )


def make_place(
    place_id: str,
    lat: float,
    lon: float,
    source: PlaceSource = PlaceSource.list_a,
    name: Optional[str] = None,
) -> PopulatedPlace:
    return PopulatedPlace(
        place_id=place_id,
        source=source,
        location=GeoPoint(lat, lon),
        names=(name,) if name else (),
    )


def make_cluster(
    cluster_id: str,
    lat: float,
    lon: float,
    urban: bool = False,
    iwi: float = 50.0,
    country: str = "AA",
) -> SurveyCluster:
    return SurveyCluster(
        cluster_id=cluster_id,
        country=country,
        location=GeoPoint(lat, lon),
        urban=urban,
        iwi=iwi,
    )


@pytest.fixture(scope="session")
def small_world() -> SynthWorld:
    return generate(SMALL_SPEC)


def make_refine_data(world: SynthWorld, with_tiles: bool = True) -> RefineData:
    """Refinement inputs built in memory from a synthetic world's listed places."""
    clusters: list[SurveyCluster] = []
    candidate_sets: dict[str, CandidateSet] = {}
    tables: list[FeatureTable] = []
    place_countries: dict[str, str] = {}
    tiles: dict[str, Tile] = {}
    for country in world.countries:
        sets, _ = assign_all(country.clusters, country.list_a, country.population)
        known = {p.place_id for p in country.list_a}
        extra = {p.place_id: p for s in sets.values() for p in s.fallback_places}
        places = country.list_a + [extra[pid] for pid in sorted(set(extra) - known)]
        tables.append(
            FeatureExtractor(country.layers, country.luminosity, country.population).table(places)
        )
        clusters += [c for c in country.clusters if c.cluster_id in sets]
        candidate_sets.update(sets)
        place_countries.update({p.place_id: country.code for p in places})
        if with_tiles:
            tiles.update(
                {pid: Tile(pid, pixels) for pid, pixels in country.tiles.items() if pid in known}
            )
    return RefineData(
        clusters=tuple(clusters),
        candidate_sets=candidate_sets,
        features=FeatureTable.concat(tables),
        place_countries=place_countries,
        tiles=tiles,
    )
