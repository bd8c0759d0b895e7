"""
Runtime configuration for the povmap pipeline.

This module provides:
- load_envs(): load POVMAP_LOG_LEVEL and POVMAP_OUTPUT_DIR from the project .env
  or the user env file if they are not already present in the environment.
- CountryInputs / Manifest: the single JSON manifest describing every input
  path, model configuration section, protocol flag and seed.
- load_manifest(): parse a manifest, resolve its paths and apply CLI overrides.
"""

import json
import os
from collections.abc import Mapping
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Any, Optional

from dotenv import dotenv_values

from povmap.errors import UsageError
from povmap.validate import DEFAULT_K
from povmap.validate import MetricVariant as MetricChoice
from povmap.xdg import user_env_file

LOG_LEVEL_ENV: str = "POVMAP_LOG_LEVEL"
OUTPUT_DIR_ENV: str = "POVMAP_OUTPUT_DIR"

DEFAULT_ITERATIONS = 7

__all__ = [
    "CountryInputs",
    "Manifest",
    "MetricChoice",
    "ProtocolChoice",
    "load_envs",
    "load_manifest",
]


def load_envs(env_file: Optional[str] = None) -> None:
    """
    Load POVMAP_LOG_LEVEL and POVMAP_OUTPUT_DIR into the process environment if
    they are not already set. The project's .env (or the given file) wins over
    the user-wide env file in the povmap config directory.
    """
    for source in (Path(env_file or ".env"), user_env_file()):
        try:
            env_values = dotenv_values(source)
        except Exception:
            # Missing or unreadable files are ignored
            continue
        for key in (LOG_LEVEL_ENV, OUTPUT_DIR_ENV):
            if not os.environ.get(key):
                val = env_values.get(key)
                if val:
                    os.environ[key] = str(val)


class ProtocolChoice(str, Enum):
    """Validation protocols run by the refinement controller."""

    single = "single"
    cross = "cross"
    pooled = "pooled"


@dataclass(frozen=True)
class CountryInputs:
    """
    Input files of one country. Optional entries are only required by the
    subcommands that read them.
    """

    code: str
    list_a: Optional[Path] = None
    list_b: Optional[Path] = None
    luminosity: Optional[Path] = None
    population: Optional[Path] = None
    roads: Optional[Path] = None
    pois: Optional[Path] = None
    buildings: Optional[Path] = None
    clusters: Optional[Path] = None
    households: Optional[Path] = None
    tiles: Optional[Path] = None

    def paths(self) -> dict[str, Path]:
        """Every configured path keyed by field name."""
        return {
            f.name: getattr(self, f.name)
            for f in fields(self)
            if f.name != "code" and getattr(self, f.name) is not None
        }


@dataclass(frozen=True)
class Manifest:
    """
    Holds the pipeline configuration.

    Attributes:
        path: The manifest file itself.
        output_dir: Directory receiving every pipeline output.
        countries: Per-country inputs keyed by country code.
        seed: Root seed of every random stream.
        k: Fold count for the k-fold protocols.
        metric: R-squared variant used for reporting and selection.
        iterations: Number of refinement iterations (0-based count).
        protocols: Validation protocols run each iteration.
        iwi_weights: Optional IWI weight file; the shipped weights otherwise.
        gbt: GBT config section.
        search: Hyperparameter search section (budget and bounds).
        cnn: Image classifier section ("spec" and "train" subsections).
        refine: Remaining refinement settings.
        overrides: Per-iteration config overrides, indexed by iteration.
        synth: Synthetic world spec section.
    """

    path: Path
    output_dir: Path
    countries: Mapping[str, CountryInputs] = field(default_factory=dict)
    seed: int = 0
    k: int = DEFAULT_K
    metric: MetricChoice = MetricChoice.pearson2
    iterations: int = DEFAULT_ITERATIONS
    protocols: tuple[ProtocolChoice, ...] = tuple(ProtocolChoice)
    iwi_weights: Optional[Path] = None
    gbt: Mapping[str, Any] = field(default_factory=dict)
    search: Mapping[str, Any] = field(default_factory=dict)
    cnn: Mapping[str, Any] = field(default_factory=dict)
    refine: Mapping[str, Any] = field(default_factory=dict)
    overrides: tuple[Mapping[str, Any], ...] = ()
    synth: Mapping[str, Any] = field(default_factory=dict)

    def country_codes(self) -> list[str]:
        return sorted(self.countries)

    def stage_dir(self, stage: str) -> Path:
        return self.output_dir / stage


_TOP_LEVEL_KEYS = {f.name for f in fields(Manifest)} - {"path"}
_COUNTRY_KEYS = {f.name for f in fields(CountryInputs)} - {"code"}


def _resolve(base: Path, value: Any, key: str) -> Path:
    if not isinstance(value, str) or not value:
        raise UsageError(f"Manifest key {key} must be a non-empty path string")
    path = Path(value).expanduser()
    return path if path.is_absolute() else base / path


def _as_int(value: Any, key: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise UsageError(f"Manifest key {key} must be an integer")
    return value


def _section(data: Mapping[str, Any], key: str) -> Mapping[str, Any]:
    value = data.get(key, {})
    if not isinstance(value, dict):
        raise UsageError(f"Manifest key {key} must be an object")
    return value


def _parse_country(code: str, entry: Any, base: Path) -> CountryInputs:
    if not isinstance(entry, dict):
        raise UsageError(f"Manifest key countries.{code} must be an object")
    unknown = sorted(set(entry) - _COUNTRY_KEYS)
    if unknown:
        raise UsageError(
            "Unknown manifest keys: " + ", ".join(f"countries.{code}.{k}" for k in unknown)
        )
    paths = {
        name: _resolve(base, value, f"countries.{code}.{name}") for name, value in entry.items()
    }
    return CountryInputs(code=code, **paths)


def load_manifest(
    path: Path,
    k: Optional[int] = None,
    metric: Optional[MetricChoice] = None,
    iterations: Optional[int] = None,
    seed: Optional[int] = None,
) -> Manifest:
    """
    Parse a JSON manifest. Relative paths resolve against the manifest's
    directory; the output directory defaults to POVMAP_OUTPUT_DIR, then to
    ``output`` next to the manifest. Non-None arguments override the file.
    """
    source = Path(path)
    if not source.is_file():
        raise UsageError(f"Manifest {source} does not exist")
    try:
        data = json.loads(source.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise UsageError(f"Manifest {source} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise UsageError(f"Manifest {source} must hold a JSON object")

    unknown = sorted(set(data) - _TOP_LEVEL_KEYS)
    if unknown:
        raise UsageError(f"Unknown manifest keys: {', '.join(unknown)}")

    base = source.resolve().parent
    output = data.get("output_dir") or os.environ.get(OUTPUT_DIR_ENV) or "output"
    countries_data = _section(data, "countries")
    overrides = data.get("overrides", [])
    if not isinstance(overrides, list) or not all(isinstance(o, dict) for o in overrides):
        raise UsageError("Manifest key overrides must be a list of objects")

    try:
        metric_value = MetricChoice(data.get("metric", MetricChoice.pearson2.value))
        protocols = tuple(
            ProtocolChoice(p) for p in data.get("protocols", [p.value for p in ProtocolChoice])
        )
    except ValueError as e:
        raise UsageError(f"Manifest {source}: {e}") from e

    manifest = Manifest(
        path=source,
        output_dir=_resolve(base, output, "output_dir"),
        countries={
            code: _parse_country(code, entry, base)
            for code, entry in sorted(countries_data.items())
        },
        seed=_as_int(data.get("seed", 0), "seed"),
        k=_as_int(data.get("k", DEFAULT_K), "k"),
        metric=metric_value,
        iterations=_as_int(data.get("iterations", DEFAULT_ITERATIONS), "iterations"),
        protocols=protocols,
        iwi_weights=_resolve(base, data["iwi_weights"], "iwi_weights")
        if data.get("iwi_weights")
        else None,
        gbt=_section(data, "gbt"),
        search=_section(data, "search"),
        cnn=_section(data, "cnn"),
        refine=_section(data, "refine"),
        overrides=tuple(overrides),
        synth=_section(data, "synth"),
    )

    flags: dict[str, Any] = {}
    if k is not None:
        flags["k"] = k
    if metric is not None:
        flags["metric"] = metric
    if iterations is not None:
        flags["iterations"] = iterations
    if seed is not None:
        flags["seed"] = seed
    manifest = replace(manifest, **flags)

    if manifest.k < 2:
        raise UsageError(f"k must be >= 2, got {manifest.k}")
    if manifest.iterations < 1:
        raise UsageError(f"iterations must be >= 1, got {manifest.iterations}")
    return manifest


def manifest_document(manifest: Manifest) -> dict[str, Any]:
    """JSON-ready form of a manifest, paths relative to the manifest's folder when possible."""
    base = manifest.path.resolve().parent

    def rel(p: Path) -> str:
        try:
            return str(p.relative_to(base))
        except ValueError:
            return str(p)

    document: dict[str, Any] = {
        "output_dir": rel(manifest.output_dir),
        "seed": manifest.seed,
        "k": manifest.k,
        "metric": manifest.metric.value,
        "iterations": manifest.iterations,
        "protocols": [p.value for p in manifest.protocols],
        "countries": {
            code: {name: rel(p) for name, p in inputs.paths().items()}
            for code, inputs in sorted(manifest.countries.items())
        },
    }
    if manifest.iwi_weights is not None:
        document["iwi_weights"] = rel(manifest.iwi_weights)
    for key in ("gbt", "search", "cnn", "refine", "synth"):
        section = getattr(manifest, key)
        if section:
            document[key] = dict(section)
    if manifest.overrides:
        document["overrides"] = [dict(o) for o in manifest.overrides]
    return document
