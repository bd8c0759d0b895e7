"""
Preflight checks for the povmap CLI.
"""

import hashlib
import logging
from collections.abc import Mapping
from enum import Enum
from pathlib import Path

from povmap.errors import UsageError
from povmap.runtime_config import Manifest

logger = logging.getLogger(__name__)

_CHUNK = 1 << 20


class Stage(str, Enum):
    """CLI subcommands, in pipeline order."""

    iwi = "iwi"
    places = "places"
    features = "features"
    train = "train"
    refine = "refine"
    validate = "validate"
    synth = "synth"
    export = "export"


_MODEL_INPUTS = (
    "list_a",
    "luminosity",
    "population",
    "roads",
    "pois",
    "buildings",
    "clusters",
)

# Country inputs each stage reads; optional inputs are checked when configured.
STAGE_INPUTS: dict[Stage, tuple[str, ...]] = {
    Stage.iwi: ("households",),
    Stage.places: ("list_a", "population"),
    Stage.features: _MODEL_INPUTS,
    Stage.train: _MODEL_INPUTS,
    Stage.refine: _MODEL_INPUTS,
    Stage.validate: _MODEL_INPUTS,
    Stage.synth: (),
    Stage.export: ("list_a", "population"),
}
OPTIONAL_INPUTS: tuple[str, ...] = ("list_b", "tiles")


class PreflightError(UsageError):
    """Base exception for preflight check failures."""

    pass


class PreflightCheckError(PreflightError):
    """Raised when one or more preflight checks fail."""

    def __init__(self, errors: list[str]) -> None:
        self.errors = errors
        super().__init__(f"Preflight checks failed: {'; '.join(errors)}")


def stage_inputs(manifest: Manifest, stage: Stage) -> dict[str, Path]:
    """Every configured input the stage reads, keyed by manifest key."""
    if stage is Stage.synth:
        return {}
    wanted = STAGE_INPUTS[stage] + (OPTIONAL_INPUTS if stage is not Stage.iwi else ())
    inputs: dict[str, Path] = {}
    if manifest.iwi_weights is not None and stage is Stage.iwi:
        inputs["iwi_weights"] = manifest.iwi_weights
    for code in manifest.country_codes():
        paths = manifest.countries[code].paths()
        for name in wanted:
            if name in paths:
                inputs[f"countries.{code}.{name}"] = paths[name]
    return inputs


def run_preflight_checks(manifest: Manifest, stage: Stage) -> dict[str, Path]:
    """
    Validate that every path ``stage`` reads is configured and exists.

    Raises:
        PreflightCheckError: listing each offending manifest key.

    Returns:
        The stage's inputs keyed by manifest key.
    """
    errors: list[str] = []
    if stage is not Stage.synth and not manifest.countries:
        errors.append("countries: no countries configured")

    for code in manifest.country_codes():
        paths = manifest.countries[code].paths()
        for name in STAGE_INPUTS[stage]:
            if name not in paths:
                errors.append(f"countries.{code}.{name}: not set")

    inputs = stage_inputs(manifest, stage)
    for key, path in inputs.items():
        if not path.is_file():
            errors.append(f"{key}: {path} does not exist")

    if manifest.output_dir.exists() and not manifest.output_dir.is_dir():
        errors.append(f"output_dir: {manifest.output_dir} is not a directory")

    if errors:
        raise PreflightCheckError(errors)

    logger.info(f"Preflight for {stage.value}: {len(inputs)} input file(s) present")
    return inputs


def file_digest(path: Path) -> str:
    digest = hashlib.sha256()
    with Path(path).open("rb") as handle:
        for chunk in iter(lambda: handle.read(_CHUNK), b""):
            digest.update(chunk)
    return digest.hexdigest()


def input_digests(paths: Mapping[str, Path]) -> dict[str, str]:
    """SHA-256 of each input file, keyed like ``paths``."""
    return {key: file_digest(path) for key, path in sorted(paths.items())}
