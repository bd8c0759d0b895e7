"""
Synthetic multi-country world with known wealth.

Each country gets a smooth latent wealth field (a sum of radial bumps), places
scattered with a minimum spacing, and map layers, rasters and tiles whose
intensities grow with the wealth of the place they surround. Survey clusters
sit on places and are displaced the way published survey coordinates are.
Everything derives from one seed; each country draws from its own sub-seed.
"""

import json
import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

import numpy as np
import numpy.typing as npt
import pandas as pd
from PIL import Image, ImageDraw

from povmap.clusters import (
    RURAL_RADIUS_M,
    URBAN_RADIUS_M,
    SurveyCluster,
    TrainingRows,
    write_clusters,
)
from povmap.errors import DataError
from povmap.features.extract import BASE_COLUMNS, FeatureExtractor
from povmap.features.layers import (
    POI_CATEGORIES,
    Building,
    LayerSet,
    Poi,
    Surface,
    Way,
    make_building,
    write_buildings,
    write_pois,
    write_ways,
)
from povmap.geo import METERS_PER_DEGREE, GeoPoint
from povmap.models.gbt import GbtConfig, predict, train
from povmap.models.imgcls import CnnSpec, CnnTrainConfig
from povmap.places import PlaceSource, PopulatedPlace
from povmap.rasters import RasterGrid, write_grid
from povmap.validate import DEFAULT_K, MetricVariant, pooled_eval

logger = logging.getLogger(__name__)

FloatArray = npt.NDArray[np.float64]

NODATA = -9999.0
GROUND_TRUTH_FILE = "ground_truth.csv"
GROUND_TRUTH_COLUMNS: tuple[str, ...] = (
    "place_id",
    "country",
    "lat",
    "lon",
    "wealth",
    "hidden",
    "in_list_b",
    "cluster_id",
)
MANIFEST_FILE = "manifest.json"
CEILING_STREAM = 0xCE11
# fixed wealth cuts for tile colors; the classifier learns its own cuts
TILE_CLASS_CUTS: tuple[float, float, float] = (25.0, 50.0, 75.0)
TILE_COLORS: tuple[tuple[int, int, int], ...] = (
    (200, 40, 40),
    (220, 160, 50),
    (70, 170, 80),
    (50, 80, 210),
)
ROAD_CLASSES: tuple[str, ...] = ("tertiary", "secondary", "primary", "trunk")
# desk-scale model settings written into generated manifests
DESK_GBT: dict[str, Any] = {"n_estimators": 100, "learning_rate": 0.1, "max_depth": 3}
DESK_CNN_TRAIN: dict[str, Any] = {"epochs": 4, "batch_size": 16, "learning_rate": 1e-3}


class SynthSpecError(DataError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    """
    Parameters of a synthetic world. Per-place intensities are linear in the
    place's wealth w in [0, 100]: road count 1 + floor(w / road_step), road
    length road_length_m + road_length_per_w * w, and so on.
    """

    countries: int = 5
    places_per_country: int = 40
    hidden_places_per_country: int = 4
    clusters_per_country: int = 30
    list_b_fraction: float = 0.5
    list_b_jitter_m: float = 300.0
    span_deg: float = 0.5
    min_spacing_m: float = 3_000.0
    origin_lat: float = 5.0
    origin_lon: float = 20.0
    cellsize_deg: float = 0.0025
    bumps: int = 6
    bump_width_m: float = 12_000.0
    bump_amplitude: tuple[float, float] = (-35.0, 55.0)
    base_wealth: tuple[float, float] = (15.0, 45.0)
    road_step: float = 20.0
    road_length_m: float = 150.0
    road_length_per_w: float = 9.0
    buildings_base: float = 2.0
    buildings_per_w: float = 0.3
    building_area_m2: float = 40.0
    building_area_per_w: float = 2.0
    pois_per_w: float = 1.0 / 15.0
    population_base: float = 300.0
    population_per_w: float = 30.0
    population_sigma_m: float = 600.0
    background_population: float = 0.2
    luminosity_base: float = 0.5
    luminosity_per_w: float = 0.06
    luminosity_sigma_m: float = 1_000.0
    urban_wealth: float = 55.0
    noise_sigma: float = 7.0
    tile_size: int = 32
    tile_noise: float = 0.05
    seed: int = 0

    def __post_init__(self) -> None:
        errors = []
        if self.countries < 1 or self.places_per_country < 1:
            errors.append("need at least one country with one place")
        if self.clusters_per_country < 0 or self.hidden_places_per_country < 0:
            errors.append("counts must be non-negative")
        rates = (
            "road_length_m",
            "road_length_per_w",
            "buildings_base",
            "buildings_per_w",
            "building_area_per_w",
            "pois_per_w",
            "population_base",
            "population_per_w",
            "background_population",
            "luminosity_base",
            "luminosity_per_w",
        )
        errors += [f"{name} is negative" for name in rates if getattr(self, name) < 0]
        if self.building_area_m2 <= 0:
            errors.append("building_area_m2 must be positive")
        if self.road_step <= 0:
            errors.append("road_step must be positive")
        if self.noise_sigma < 0:
            errors.append("noise_sigma is negative")
        if not 0.0 <= self.list_b_fraction <= 1.0:
            errors.append("list_b_fraction not in [0, 1]")
        if self.list_b_jitter_m * 2 >= self.min_spacing_m:
            errors.append("list_b_jitter_m must stay under half of min_spacing_m")
        if self.road_length_m + 100 * self.road_length_per_w >= self.min_spacing_m:
            errors.append("roads longer than the place spacing")
        if self.tile_size < 8:
            errors.append("tile_size must be >= 8")
        if errors:
            raise SynthSpecError("Infeasible synthetic spec: " + "; ".join(errors))

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        for key in ("bump_amplitude", "base_wealth"):
            data[key] = list(data[key])
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "SynthSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise SynthSpecError(f"Unknown synth keys: {', '.join(unknown)}")
        values = dict(data)
        for key in ("bump_amplitude", "base_wealth"):
            if key in values:
                values[key] = tuple(values[key])
        return cls(**values)


@dataclass(frozen=True)
class TruePlace:
    place_id: str
    country: str
    location: GeoPoint
    wealth: float
    hidden: bool = False
    in_list_b: bool = False


@dataclass(eq=False)
class CountryWorld:
    code: str
    places: list[TruePlace]
    list_a: list[PopulatedPlace]
    list_b: list[PopulatedPlace]
    layers: LayerSet
    luminosity: RasterGrid
    population: RasterGrid
    clusters: list[SurveyCluster]
    anchors: dict[str, str]
    tiles: dict[str, FloatArray] = field(default_factory=dict)


@dataclass(eq=False)
class SynthWorld:
    spec: SynthSpec
    countries: list[CountryWorld]

    def places(self) -> list[TruePlace]:
        return [p for c in self.countries for p in c.places]

    def clusters(self) -> list[SurveyCluster]:
        return [cl for c in self.countries for cl in c.clusters]


def _offset(origin: GeoPoint, east_m: float, north_m: float) -> GeoPoint:
    lat = origin.lat + north_m / METERS_PER_DEGREE
    lon = origin.lon + east_m / (METERS_PER_DEGREE * math.cos(math.radians(origin.lat)))
    return GeoPoint(lat, lon)


def _local_m(origin: GeoPoint, lats: FloatArray, lons: FloatArray) -> tuple[FloatArray, FloatArray]:
    east = (lons - origin.lon) * METERS_PER_DEGREE * math.cos(math.radians(origin.lat))
    north = (lats - origin.lat) * METERS_PER_DEGREE
    return east, north


def _scatter(
    rng: np.random.Generator, n: int, south: float, west: float, spec: SynthSpec
) -> list[GeoPoint]:
    """Rejection-sample ``n`` points in the country square with minimum spacing."""
    origin = GeoPoint(south, west)
    side_m = spec.span_deg * METERS_PER_DEGREE
    margin = 0.1 * side_m
    xs: list[float] = []
    ys: list[float] = []
    attempts = 0
    while len(xs) < n:
        attempts += 1
        if attempts > 200 * n + 1000:
            raise SynthSpecError(
                f"Cannot place {n} places {spec.min_spacing_m} m apart in {spec.span_deg} degrees"
            )
        x, y = rng.uniform(margin, side_m - margin, size=2)
        if xs and np.min(np.hypot(np.array(xs) - x, np.array(ys) - y)) < spec.min_spacing_m:
            continue
        xs.append(float(x))
        ys.append(float(y))
    return [_offset(origin, x, y) for x, y in zip(xs, ys)]


def _wealth_field(
    rng: np.random.Generator, spec: SynthSpec
) -> tuple[float, FloatArray, FloatArray, FloatArray]:
    side_m = spec.span_deg * METERS_PER_DEGREE
    base = float(rng.uniform(*spec.base_wealth))
    centers_x = rng.uniform(0.0, side_m, size=spec.bumps)
    centers_y = rng.uniform(0.0, side_m, size=spec.bumps)
    amplitudes = rng.uniform(*spec.bump_amplitude, size=spec.bumps)
    return base, centers_x, centers_y, amplitudes


def _wealth_at(
    points: Sequence[GeoPoint],
    origin: GeoPoint,
    field_params: tuple[float, FloatArray, FloatArray, FloatArray],
    spec: SynthSpec,
) -> FloatArray:
    base, cx, cy, amp = field_params
    x, y = _local_m(
        origin, np.array([p.lat for p in points]), np.array([p.lon for p in points])
    )
    d2 = (x[:, None] - cx[None, :]) ** 2 + (y[:, None] - cy[None, :]) ** 2
    w = base + (amp[None, :] * np.exp(-d2 / (2.0 * spec.bump_width_m**2))).sum(axis=1)
    result: FloatArray = np.clip(w, 0.0, 100.0)
    return result


def road_count(w: float, spec: SynthSpec) -> int:
    return 1 + int(math.floor(w / spec.road_step))


def road_length_m(w: float, spec: SynthSpec) -> float:
    return spec.road_length_m + spec.road_length_per_w * w


def _roads(
    rng: np.random.Generator, place: TruePlace, spec: SynthSpec, start: int
) -> list[Way]:
    """Straight roads through the place center; all share the center node."""
    n = road_count(place.wealth, spec)
    half = road_length_m(place.wealth, spec) / 2.0
    phase = rng.uniform(0.0, math.pi)
    highway = ROAD_CLASSES[min(len(ROAD_CLASSES) - 1, int(place.wealth // 25))]
    ways = []
    for i in range(n):
        angle = phase + i * math.pi / n
        dx, dy = half * math.cos(angle), half * math.sin(angle)
        paved = rng.random() < place.wealth / 100.0
        ways.append(
            Way(
                way_id=f"{place.country}-w{start + i}",
                points=(
                    _offset(place.location, -dx, -dy),
                    place.location,
                    _offset(place.location, dx, dy),
                ),
                highway=highway,
                surface=Surface.paved if paved else Surface.unpaved,
            )
        )
    return ways


def _buildings(
    rng: np.random.Generator, place: TruePlace, spec: SynthSpec, start: int
) -> list[Building]:
    n = int(round(spec.buildings_base + spec.buildings_per_w * place.wealth))
    side = math.sqrt(spec.building_area_m2 + spec.building_area_per_w * place.wealth)
    buildings = []
    for i in range(n):
        r = 600.0 * math.sqrt(rng.random())
        theta = rng.uniform(0.0, 2.0 * math.pi)
        cx, cy = r * math.cos(theta), r * math.sin(theta)
        corners = [(cx, cy), (cx + side, cy), (cx + side, cy + side), (cx, cy + side)]
        ring = [_offset(place.location, x, y) for x, y in corners]
        buildings.append(make_building(f"{place.country}-b{start + i}", ring))
    return buildings


def _pois(rng: np.random.Generator, place: TruePlace, spec: SynthSpec, start: int) -> list[Poi]:
    n = int(math.floor(spec.pois_per_w * place.wealth))
    pois = []
    for i in range(n):
        r = 500.0 * math.sqrt(rng.random())
        theta = rng.uniform(0.0, 2.0 * math.pi)
        pois.append(
            Poi(
                poi_id=f"{place.country}-p{start + i}",
                location=_offset(place.location, r * math.cos(theta), r * math.sin(theta)),
                category=POI_CATEGORIES[int(rng.integers(0, len(POI_CATEGORIES)))],
            )
        )
    return pois


def _grids(
    places: Sequence[TruePlace], south: float, west: float, spec: SynthSpec
) -> tuple[RasterGrid, RasterGrid]:
    margin = 0.05
    n = int(math.ceil((spec.span_deg + 2 * margin) / spec.cellsize_deg))
    xll, yll = west - margin, south - margin
    rows = yll + (n - np.arange(n) - 0.5) * spec.cellsize_deg
    cols = xll + (np.arange(n) + 0.5) * spec.cellsize_deg
    lat, lon = np.meshgrid(rows, cols, indexing="ij")
    origin = GeoPoint(south, west)
    px, py = _local_m(origin, lat, lon)
    pixel_area = (spec.cellsize_deg * METERS_PER_DEGREE) ** 2 * math.cos(math.radians(south))

    population = np.full((n, n), spec.background_population)
    luminosity = np.zeros((n, n))
    for place in places:
        x, y = _local_m(origin, np.array([place.location.lat]), np.array([place.location.lon]))
        d2 = (px - x[0]) ** 2 + (py - y[0]) ** 2
        total = spec.population_base + spec.population_per_w * place.wealth
        s2 = spec.population_sigma_m**2
        population += total * pixel_area / (2 * math.pi * s2) * np.exp(-d2 / (2 * s2))
        peak = spec.luminosity_base + spec.luminosity_per_w * place.wealth
        luminosity += peak * np.exp(-d2 / (2 * spec.luminosity_sigma_m**2))

    def grid(values: FloatArray) -> RasterGrid:
        return RasterGrid(
            ncols=n, nrows=n, xll=xll, yll=yll, cellsize=spec.cellsize_deg, nodata=NODATA,
            values=np.round(values, 4),
        )

    return grid(luminosity), grid(population)


def tile_class(w: float) -> int:
    return int(np.searchsorted(np.asarray(TILE_CLASS_CUTS), w, side="right"))


def render_tile(rng: np.random.Generator, place: TruePlace, spec: SynthSpec) -> FloatArray:
    """Class color background with road and building overdraw plus pixel noise."""
    size = spec.tile_size
    image = Image.new("RGB", (size, size), TILE_COLORS[tile_class(place.wealth)])
    draw = ImageDraw.Draw(image)
    n_roads = road_count(place.wealth, spec)
    phase = rng.uniform(0.0, math.pi)
    half = size * road_length_m(place.wealth, spec) / (2.0 * 1600.0)
    c = size / 2.0
    for i in range(n_roads):
        angle = phase + i * math.pi / n_roads
        dx, dy = half * math.cos(angle), half * math.sin(angle)
        draw.line([(c - dx, c - dy), (c + dx, c + dy)], fill=(128, 128, 128), width=1)
    n_buildings = int(round(spec.buildings_base + spec.buildings_per_w * place.wealth))
    for _ in range(n_buildings):
        x, y = rng.integers(0, size - 2, size=2)
        draw.rectangle([int(x), int(y), int(x) + 1, int(y) + 1], fill=(40, 40, 40))
    pixels = np.asarray(image, dtype=np.float64) / 255.0
    noisy: FloatArray = np.clip(pixels + rng.normal(0.0, spec.tile_noise, pixels.shape), 0, 1)
    return noisy


def _displace(
    rng: np.random.Generator, location: GeoPoint, urban: bool
) -> GeoPoint:
    limit = (URBAN_RADIUS_M if urban else RURAL_RADIUS_M) * 0.98
    distance = limit * rng.random()
    theta = rng.uniform(0.0, 2.0 * math.pi)
    return _offset(location, distance * math.cos(theta), distance * math.sin(theta))


def _country(
    index: int, seq: np.random.SeedSequence, spec: SynthSpec
) -> CountryWorld:
    world_seq, noise_seq = seq.spawn(2)
    rng = np.random.default_rng(world_seq)
    noise = np.random.default_rng(noise_seq)
    code = f"S{index + 1}"
    south = spec.origin_lat
    west = spec.origin_lon + index * (spec.span_deg + 0.5)
    origin = GeoPoint(south, west)

    n_listed = spec.places_per_country
    points = _scatter(rng, n_listed + spec.hidden_places_per_country, south, west, spec)
    wealth = _wealth_at(points, origin, _wealth_field(rng, spec), spec)
    in_b = rng.random(len(points)) < spec.list_b_fraction
    places = [
        TruePlace(
            place_id=f"{code}-{'h' if i >= n_listed else 'a'}{i:04d}",
            country=code,
            location=p,
            wealth=float(w),
            hidden=i >= n_listed,
            in_list_b=bool(in_b[i]) and i < n_listed,
        )
        for i, (p, w) in enumerate(zip(points, wealth))
    ]

    ways: list[Way] = []
    buildings: list[Building] = []
    pois: list[Poi] = []
    for place in places:
        ways += _roads(rng, place, spec, len(ways))
        buildings += _buildings(rng, place, spec, len(buildings))
        pois += _pois(rng, place, spec, len(pois))
    luminosity, population = _grids(places, south, west, spec)

    list_a = [
        PopulatedPlace(
            place_id=p.place_id,
            source=PlaceSource.list_a,
            location=p.location,
            names=(f"Place {p.place_id}",),
            admin1=f"{code}-R{int(p.location.lon * 10) % 3}",
            admin2=f"{code}-D{int(p.location.lat * 20) % 5}",
        )
        for p in places
        if not p.hidden
    ]
    list_b = []
    for p in places:
        if not p.in_list_b:
            continue
        r = spec.list_b_jitter_m * rng.random()
        theta = rng.uniform(0.0, 2.0 * math.pi)
        list_b.append(
            PopulatedPlace(
                place_id=p.place_id.replace("-a", "-b"),
                source=PlaceSource.list_b,
                location=_offset(p.location, r * math.cos(theta), r * math.sin(theta)),
                names=(f"Place {p.place_id}",),
            )
        )

    n_clusters = min(spec.clusters_per_country, len(places))
    anchor_idx = np.sort(rng.choice(len(places), size=n_clusters, replace=False))
    clusters = []
    anchors = {}
    for j, i in enumerate(anchor_idx):
        place = places[int(i)]
        urban = place.wealth >= spec.urban_wealth
        observed = float(np.clip(place.wealth + noise.normal(0.0, spec.noise_sigma), 0, 100))
        cluster_id = f"{code}-c{j:04d}"
        clusters.append(
            SurveyCluster(
                cluster_id=cluster_id,
                country=code,
                location=_displace(rng, place.location, urban),
                urban=urban,
                iwi=round(observed, 6),
            )
        )
        anchors[cluster_id] = place.place_id

    tiles = {p.place_id: render_tile(rng, p, spec) for p in places}
    logger.info(
        f"Country {code}: {len(places)} places, {len(ways)} ways, {len(buildings)} buildings, "
        f"{len(clusters)} clusters"
    )
    return CountryWorld(
        code=code,
        places=places,
        list_a=list_a,
        list_b=list_b,
        layers=LayerSet(ways=tuple(ways), pois=tuple(pois), buildings=tuple(buildings)),
        luminosity=luminosity,
        population=population,
        clusters=clusters,
        anchors=anchors,
        tiles=tiles,
    )


def generate(spec: SynthSpec) -> SynthWorld:
    """Build the world; countries use independent sub-seeds of ``spec.seed``."""
    children = np.random.SeedSequence(spec.seed).spawn(spec.countries)
    countries = [_country(i, seq, spec) for i, seq in enumerate(children)]
    return SynthWorld(spec=spec, countries=countries)


def true_rows(world: SynthWorld, sigma: Optional[float] = None) -> TrainingRows:
    """
    One row per true place: features at the undisplaced location and wealth
    plus noise of scale ``sigma`` (default the spec's). The noise comes from a
    stream independent of the world draws, so only its scale varies with sigma.
    """
    sigma = world.spec.noise_sigma if sigma is None else sigma
    ids: list[str] = []
    countries: list[str] = []
    xs: list[FloatArray] = []
    wealth: list[float] = []
    for country in world.countries:
        extractor = FeatureExtractor(country.layers, country.luminosity, country.population)
        for place in country.places:
            anchor = PopulatedPlace(
                place_id=place.place_id, source=PlaceSource.list_a, location=place.location
            )
            vector = extractor.vector(anchor)
            xs.append(np.asarray(vector.values[: len(BASE_COLUMNS)], dtype=np.float64))
            ids.append(place.place_id)
            countries.append(country.code)
            wealth.append(place.wealth)
    z = np.random.default_rng([world.spec.seed, CEILING_STREAM]).standard_normal(len(ids))
    y = np.clip(np.array(wealth) + sigma * z, 0.0, 100.0)
    return TrainingRows(
        cluster_ids=tuple(ids),
        countries=tuple(countries),
        x=np.array(xs).reshape(len(ids), len(BASE_COLUMNS)),
        y=y,
    )


def ceiling(
    world: SynthWorld,
    sigma: Optional[float] = None,
    k: int = DEFAULT_K,
    config: Optional[GbtConfig] = None,
) -> float:
    """Held-out pearson R-squared of the reference GBT on true place rows."""
    rows = true_rows(world, sigma)
    gbt = config or GbtConfig()

    def trainer(train_rows: TrainingRows, test_rows: TrainingRows) -> FloatArray:
        return predict(train(train_rows, config=gbt), test_rows.x)

    report = pooled_eval(rows, k, world.spec.seed, trainer, MetricVariant.pearson2)
    value = report.scores().get("all", 0.0)
    used = world.spec.noise_sigma if sigma is None else sigma
    logger.info(f"Ceiling R2 {value:.4f} at noise sigma {used}")
    return value


def _write_tiles(country: CountryWorld, root: Path) -> Path:
    tile_dir = root / country.code / "tiles"
    tile_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for place in country.places:
        path = tile_dir / f"{place.place_id}.png"
        data = np.clip(np.rint(country.tiles[place.place_id] * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(data, mode="RGB").save(path, format="PNG")
        rows.append(
            {
                "place_id": place.place_id,
                "path": str(path.relative_to(root / country.code)),
                "lat": place.location.lat,
                "lon": place.location.lon,
            }
        )
    manifest = root / country.code / "tiles.csv"
    pd.DataFrame(rows, columns=["place_id", "path", "lat", "lon"]).to_csv(manifest, index=False)
    return manifest


def _write_places(places: Sequence[PopulatedPlace], path: Path) -> None:
    frame = pd.DataFrame(
        {
            "place_id": [p.place_id for p in places],
            "name": [p.name or "" for p in places],
            "lat": [p.location.lat for p in places],
            "lon": [p.location.lon for p in places],
            "admin1": [p.admin1 or "" for p in places],
            "admin2": [p.admin2 or "" for p in places],
            "place": ["village"] * len(places),
        },
        columns=["place_id", "name", "lat", "lon", "admin1", "admin2", "place"],
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)


def write_world(world: SynthWorld, out_dir: Path, iterations: int = 7) -> Path:
    """
    Write every country's inputs in the ingestion formats, ``ground_truth.csv``
    and a ready-to-run ``manifest.json``; returns the manifest path.
    """
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    countries: dict[str, dict[str, str]] = {}
    for country in world.countries:
        base = root / country.code
        base.mkdir(parents=True, exist_ok=True)
        _write_places(country.list_a, base / "list_a.csv")
        _write_places(country.list_b, base / "list_b.csv")
        write_grid(country.luminosity, base / "luminosity.asc")
        write_grid(country.population, base / "population.asc")
        write_ways(list(country.layers.ways), base / "roads.geojson")
        write_pois(list(country.layers.pois), base / "pois.csv")
        write_buildings(list(country.layers.buildings), base / "buildings.geojson")
        write_clusters(country.clusters, base / "clusters.csv")
        _write_tiles(country, root)
        countries[country.code] = {
            name: f"{country.code}/{file}"
            for name, file in (
                ("list_a", "list_a.csv"),
                ("list_b", "list_b.csv"),
                ("luminosity", "luminosity.asc"),
                ("population", "population.asc"),
                ("roads", "roads.geojson"),
                ("pois", "pois.csv"),
                ("buildings", "buildings.geojson"),
                ("clusters", "clusters.csv"),
                ("tiles", "tiles.csv"),
            )
        }

    anchors = {pid: cid for c in world.countries for cid, pid in c.anchors.items()}
    truth = pd.DataFrame(
        [
            {
                "place_id": p.place_id,
                "country": p.country,
                "lat": p.location.lat,
                "lon": p.location.lon,
                "wealth": p.wealth,
                "hidden": int(p.hidden),
                "in_list_b": int(p.in_list_b),
                "cluster_id": anchors.get(p.place_id, ""),
            }
            for p in world.places()
        ],
        columns=list(GROUND_TRUTH_COLUMNS),
    )
    truth.to_csv(root / GROUND_TRUTH_FILE, index=False)

    spec = world.spec
    manifest = {
        "output_dir": "output",
        "seed": spec.seed,
        "k": DEFAULT_K,
        "metric": MetricVariant.pearson2.value,
        "iterations": iterations,
        "countries": countries,
        "gbt": DESK_GBT,
        "cnn": {
            "spec": CnnSpec(input_size=spec.tile_size).to_dict(),
            "train": CnnTrainConfig.from_dict(DESK_CNN_TRAIN).to_dict(),
        },
        "synth": spec.to_dict(),
    }
    path = root / MANIFEST_FILE
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info(f"Synthetic world with {len(world.countries)} countries written to {root}")
    return path


def read_ground_truth(path: Path) -> pd.DataFrame:
    return pd.read_csv(
        path, dtype={"place_id": str, "country": str, "cluster_id": str}, keep_default_na=False
    )
