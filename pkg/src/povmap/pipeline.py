"""
Stage functions behind the CLI subcommands.

Each stage reads the inputs named in the manifest and writes its outputs under
``<output_dir>/<stage>/``. Stages never modify their inputs.
"""

import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import pandas as pd

from povmap.clusters import CandidateSet, SurveyCluster, assign_all, read_clusters
from povmap.errors import DataError, UsageError
from povmap.features.extract import FeatureExtractor, FeatureTable
from povmap.features.layers import ingest_layers
from povmap.features.spatial_index import PointIndex
from povmap.iwi import ClusterIwi, cluster_iwi, load_weights, read_households, write_cluster_iwi
from povmap.models.imgcls import CnnError, Tile, read_tile
from povmap.places import (
    PlaceSource,
    PopulatedPlace,
    build_registry,
    read_place_list,
    read_registry,
    write_registry,
)
from povmap.rasters import read_grid
from povmap.refine import RefineConfig, RefineData
from povmap.refine.state import checkpoint_settings, iteration_dir, latest_iteration
from povmap.runtime_config import CountryInputs, Manifest
from povmap.validate import ValidationReport, read_report, write_report

logger = logging.getLogger(__name__)

TILE_MATCH_M = 800.0
CANDIDATE_COLUMNS: tuple[str, ...] = ("cluster_id", "provenance", "candidates")


class PipelineError(DataError):
    pass


@dataclass(frozen=True, eq=False)
class CountryFeatures:
    code: str
    registry: list[PopulatedPlace]
    clusters: list[SurveyCluster]
    candidate_sets: dict[str, CandidateSet]
    failed: dict[str, str]
    features: FeatureTable
    tiles: dict[str, Tile]


def _required(inputs: CountryInputs, name: str) -> Path:
    path = getattr(inputs, name)
    if path is None:
        raise PipelineError(f"countries.{inputs.code}.{name} is not set")
    return Path(path)


def run_iwi(manifest: Manifest) -> dict[str, ClusterIwi]:
    """Cluster IWI per country, written to ``iwi/<code>_cluster_iwi.csv``."""
    weights = load_weights(manifest.iwi_weights)
    out = manifest.stage_dir("iwi")
    results = {}
    for code in manifest.country_codes():
        inputs = manifest.countries[code]
        result = cluster_iwi(read_households(_required(inputs, "households")), weights)
        write_cluster_iwi(result, out / f"{code}_cluster_iwi.csv")
        results[code] = result
    return results


def build_places(manifest: Manifest, write: bool = True) -> dict[str, list[PopulatedPlace]]:
    """Unified registry per country, written to ``places/<code>_registry.csv``."""
    registries = {}
    for code in manifest.country_codes():
        inputs = manifest.countries[code]
        list_a = read_place_list(_required(inputs, "list_a"), PlaceSource.list_a)
        list_b = (
            read_place_list(inputs.list_b, PlaceSource.list_b) if inputs.list_b else []
        )
        pop_grid = read_grid(_required(inputs, "population"))
        registry = build_registry(list_a, list_b, pop_grid, id_prefix=f"{code}-R")
        if write:
            write_registry(registry, manifest.stage_dir("places") / f"{code}_registry.csv")
        registries[code] = registry
        logger.info(f"Country {code}: registry of {len(registry)} places")
    return registries


def load_registries(manifest: Manifest) -> dict[str, list[PopulatedPlace]]:
    """Registries written by the places stage, rebuilt for countries without one."""
    registries = {}
    for code in manifest.country_codes():
        path = manifest.stage_dir("places") / f"{code}_registry.csv"
        if path.is_file():
            registries[code] = read_registry(path)
    missing = [c for c in manifest.country_codes() if c not in registries]
    if missing:
        partial = replace(manifest, countries={c: manifest.countries[c] for c in missing})
        registries.update(build_places(partial))
    return registries


def match_tiles(
    tile_manifest: Path,
    places: Sequence[PopulatedPlace],
    size: int,
    max_distance_m: float = TILE_MATCH_M,
) -> dict[str, Tile]:
    """
    Tiles for the given places. Rows match by ``place_id`` first; when the tile
    manifest carries ``lat``/``lon``, remaining places take the nearest unused
    tile within ``max_distance_m``.
    """
    frame = pd.read_csv(tile_manifest, dtype={"place_id": str, "path": str})
    if {"place_id", "path"} - set(frame.columns):
        raise CnnError(f"{tile_manifest}: tile manifest needs place_id and path columns")
    base = Path(tile_manifest).parent
    paths = [base / p if not Path(p).is_absolute() else Path(p) for p in frame["path"]]
    by_id = {pid: i for i, pid in enumerate(frame["place_id"])}

    chosen: dict[str, int] = {}
    for place in places:
        if place.place_id in by_id:
            chosen[place.place_id] = by_id[place.place_id]
    if {"lat", "lon"} <= set(frame.columns):
        used = set(chosen.values())
        free = [i for i in range(len(frame)) if i not in used]
        if free:
            index = PointIndex(
                frame["lat"].to_numpy(dtype=float)[free].tolist(),
                frame["lon"].to_numpy(dtype=float)[free].tolist(),
            )
            for place in sorted(places, key=lambda p: p.place_id):
                if place.place_id in chosen:
                    continue
                j, distance = index.nearest(place.location)
                row = free[j]
                if distance <= max_distance_m and row not in used:
                    chosen[place.place_id] = row
                    used.add(row)

    tiles = {pid: read_tile(paths[row], size, pid) for pid, row in sorted(chosen.items())}
    if len(tiles) < len(places):
        logger.warning(f"{len(places) - len(tiles)} of {len(places)} places have no tile")
    return tiles


def _write_candidates(sets: Mapping[str, CandidateSet], path: Path) -> None:
    frame = pd.DataFrame(
        [
            {
                "cluster_id": cid,
                "provenance": s.provenance.value,
                "candidates": "|".join(s.candidates),
            }
            for cid, s in sorted(sets.items())
        ],
        columns=list(CANDIDATE_COLUMNS),
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)


def _country_features(
    manifest: Manifest,
    code: str,
    registry: list[PopulatedPlace],
    tile_size: int,
) -> CountryFeatures:
    inputs = manifest.countries[code]
    pop_grid = read_grid(_required(inputs, "population"))
    lum_grid = read_grid(_required(inputs, "luminosity"))
    layers = ingest_layers(
        _required(inputs, "roads"), _required(inputs, "pois"), _required(inputs, "buildings")
    )
    all_clusters = read_clusters(_required(inputs, "clusters"))
    clusters = [c for c in all_clusters if c.country == code]
    if len(clusters) < len(all_clusters):
        logger.warning(
            f"Country {code}: skipped {len(all_clusters) - len(clusters)} clusters "
            "labeled with another country"
        )
    sets, failed = assign_all(clusters, registry, pop_grid)

    known = {p.place_id for p in registry}
    extra = {
        p.place_id: p
        for s in sets.values()
        for p in s.fallback_places
        if p.place_id not in known
    }
    places = registry + [extra[pid] for pid in sorted(extra)]
    table = FeatureExtractor(layers, lum_grid, pop_grid).table(places)
    tiles = match_tiles(inputs.tiles, places, tile_size) if inputs.tiles else {}
    return CountryFeatures(
        code=code,
        registry=registry,
        clusters=clusters,
        candidate_sets=sets,
        failed=failed,
        features=table,
        tiles=tiles,
    )


def build_features(
    manifest: Manifest,
    tile_size: int,
    registries: Optional[Mapping[str, list[PopulatedPlace]]] = None,
) -> RefineData:
    """
    Registry, candidate sets, features and tiles of every country; writes
    ``features/<code>_features.csv`` and ``features/<code>_candidates.csv``.
    """
    registries = registries if registries is not None else load_registries(manifest)
    out = manifest.stage_dir("features")
    per_country = []
    for code in manifest.country_codes():
        country = _country_features(manifest, code, registries[code], tile_size)
        country.features.to_csv(out / f"{code}_features.csv")
        _write_candidates(country.candidate_sets, out / f"{code}_candidates.csv")
        if country.failed:
            logger.warning(f"Country {code}: {len(country.failed)} clusters dropped")
        per_country.append(country)

    return RefineData(
        clusters=tuple(c for country in per_country for c in country.clusters),
        candidate_sets={
            cid: s for country in per_country for cid, s in country.candidate_sets.items()
        },
        features=FeatureTable.concat([c.features for c in per_country]),
        place_countries={
            pid: c.code for c in per_country for pid in c.features.place_ids
        },
        tiles={pid: t for c in per_country for pid, t in c.tiles.items()},
    )


def refine_config(manifest: Manifest, iterations: Optional[int] = None) -> RefineConfig:
    return RefineConfig.from_sections(
        iterations=iterations if iterations is not None else manifest.iterations,
        k=manifest.k,
        seed=manifest.seed,
        metric=manifest.metric,
        protocols=manifest.protocols,
        gbt=manifest.gbt,
        search=manifest.search,
        cnn=manifest.cnn,
        refine=manifest.refine,
        overrides=manifest.overrides,
    )


def checkpoint_root(manifest: Manifest) -> Optional[Path]:
    """Stage directory of the most advanced checkpoint: refine, else train."""
    for stage in ("refine", "train"):
        root = manifest.stage_dir(stage)
        if latest_iteration(root) is not None:
            return root
    return None


def read_place_predictions(root: Path) -> dict[str, float]:
    latest = latest_iteration(root)
    if latest is None:
        raise PipelineError(f"No checkpoint under {root}")
    frame = pd.read_csv(
        iteration_dir(root, latest) / "place_predictions.csv",
        dtype={"place_id": str},
        float_precision="round_trip",
    )
    return dict(zip(frame["place_id"], frame["iwi_pred"].astype(float)))


def check_checkpoint_settings(root: Path, manifest: Manifest) -> None:
    """
    Stored reports can switch metric variant but not fold count or seed; a
    checkpoint built with other settings has to be retrained.
    """
    stored = checkpoint_settings(root)
    mismatched = [
        f"{name}={stored[name]} (requested {wanted})"
        for name, wanted in (("k", manifest.k), ("seed", manifest.seed))
        if stored.get(name) is not None and stored[name] != wanted
    ]
    if mismatched:
        raise UsageError(
            f"Checkpoint under {root} was validated with {', '.join(mismatched)}; "
            "rerun train or refine with the requested settings"
        )


def rescore_reports(root: Path, manifest: Manifest) -> dict[str, ValidationReport]:
    """
    Latest checkpoint's reports under the manifest's metric variant, written to
    ``validation/``.
    """
    check_checkpoint_settings(root, manifest)
    latest = latest_iteration(root)
    if latest is None:
        raise PipelineError(f"No checkpoint under {root}")
    reports = {}
    out = manifest.stage_dir("validation")
    for protocol in manifest.protocols:
        path = iteration_dir(root, latest) / "reports" / f"{protocol.value}.json"
        if not path.is_file():
            logger.warning(f"No {protocol.value} report in iteration {latest}")
            continue
        report = replace(read_report(path), variant=manifest.metric)
        write_report(report, out, protocol.value)
        reports[protocol.value] = report
    return reports
