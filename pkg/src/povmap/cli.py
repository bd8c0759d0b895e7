import json
import logging
import os
import platform
import sys
from collections.abc import Callable
from datetime import datetime, timezone
from pathlib import Path
from typing import Annotated, Any, Optional

import numpy as np
import typer

from povmap import __version__
from povmap.console import (
    console,
    render_audit,
    render_error,
    render_event,
    render_history,
    render_report,
)
from povmap.errors import DataError, LeakageError, UsageError
from povmap.export import ExportFormat, export_maps
from povmap.logger import parse_level, setup_logging
from povmap.pipeline import (
    build_features,
    build_places,
    checkpoint_root,
    load_registries,
    read_place_predictions,
    refine_config,
    rescore_reports,
    run_iwi,
)
from povmap.preflight import (
    PreflightCheckError,
    Stage,
    input_digests,
    run_preflight_checks,
)
from povmap.refine import refine
from povmap.runtime_config import (
    LOG_LEVEL_ENV,
    Manifest,
    MetricChoice,
    load_envs,
    load_manifest,
)
from povmap.synth import SynthSpec, ceiling, generate, write_world

logger = logging.getLogger(__name__)

RUN_LOG = "run_log.jsonl"
DEFAULT_SYNTH_DIR = Path("synth_world")

EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_LEAKAGE = 3

ManifestOption = Annotated[
    Path, typer.Option("--manifest", help="Pipeline manifest (JSON)")
]
KOption = Annotated[Optional[int], typer.Option("--k", help="Fold count for k-fold protocols")]
MetricOption = Annotated[
    Optional[MetricChoice], typer.Option("--metric", help="R-squared variant: pearson2 or ssres")
]
IterationsOption = Annotated[
    Optional[int], typer.Option("--iterations", help="Number of refinement iterations")
]
SeedOption = Annotated[Optional[int], typer.Option("--seed", help="Root seed")]


def append_run_log(
    path: Path, subcommand: str, seeds: dict[str, Any], digests: dict[str, str]
) -> None:
    """One JSON line per subcommand run."""
    record = {
        "subcommand": subcommand,
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "seeds": seeds,
        "inputs": digests,
        "timestamp": datetime.now(timezone.utc).isoformat(),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", encoding="utf-8") as handle:
        handle.write(json.dumps(record, sort_keys=True) + "\n")


def _run(
    stage: Stage,
    manifest_path: Path,
    body: Callable[[Manifest], None],
    k: Optional[int] = None,
    metric: Optional[MetricChoice] = None,
    iterations: Optional[int] = None,
    seed: Optional[int] = None,
) -> None:
    """Load and check the manifest, run ``body`` and map failures onto exit codes."""
    try:
        manifest = load_manifest(
            manifest_path, k=k, metric=metric, iterations=iterations, seed=seed
        )
        inputs = run_preflight_checks(manifest, stage)
        logger.info(f"Running {stage.value} with manifest {manifest.path}")
        body(manifest)
        append_run_log(
            manifest.output_dir / RUN_LOG,
            stage.value,
            {"seed": manifest.seed, "k": manifest.k, "iterations": manifest.iterations},
            input_digests(inputs),
        )
    except PreflightCheckError as e:
        for error in e.errors:
            typer.echo(f"Error: {error}", err=True)
        raise typer.Exit(code=EXIT_USAGE)
    except UsageError as e:
        render_error(str(e))
        raise typer.Exit(code=EXIT_USAGE)
    except LeakageError as e:
        logger.error(str(e))
        render_audit(e.report)
        raise typer.Exit(code=EXIT_LEAKAGE)
    except DataError as e:
        logger.error(str(e))
        render_error(str(e))
        raise typer.Exit(code=EXIT_DATA)


def iwi_command(manifest: ManifestOption) -> None:
    """Compute cluster-level IWI from household records."""

    def body(m: Manifest) -> None:
        for code, result in run_iwi(m).items():
            console.print(
                f"[bold]{code}[/bold] {len(result.means)} clusters, "
                f"{len(result.unscoreable)} unscoreable households"
            )

    _run(Stage.iwi, manifest, body)


def places_command(manifest: ManifestOption) -> None:
    """Build the unified populated-place registry of every country."""

    def body(m: Manifest) -> None:
        for code, registry in build_places(m).items():
            console.print(f"[bold]{code}[/bold] {len(registry)} places")

    _run(Stage.places, manifest, body)


def features_command(manifest: ManifestOption) -> None:
    """Assign cluster candidates and extract place features."""

    def body(m: Manifest) -> None:
        data = build_features(m, refine_config(m).cnn_spec.input_size)
        console.print(
            f"{len(data.features)} places featured, {len(data.candidate_sets)} clusters "
            f"with candidates, {len(data.tiles)} tiles matched"
        )

    _run(Stage.features, manifest, body)


def train_command(
    manifest: ManifestOption,
    k: KOption = None,
    metric: MetricOption = None,
    seed: SeedOption = None,
) -> None:
    """Train the iteration-0 feature model under every validation protocol."""

    def body(m: Manifest) -> None:
        config = refine_config(m, iterations=1)
        data = build_features(m, config.cnn_spec.input_size)
        state = refine(data, config, m.stage_dir("train"), render_event)
        render_history(state.history)

    _run(Stage.train, manifest, body, k=k, metric=metric, seed=seed)


def refine_command(
    manifest: ManifestOption,
    k: KOption = None,
    metric: MetricOption = None,
    iterations: IterationsOption = None,
    seed: SeedOption = None,
) -> None:
    """Run the co-training refinement loop with a leakage audit per iteration."""

    def body(m: Manifest) -> None:
        config = refine_config(m)
        data = build_features(m, config.cnn_spec.input_size)
        state = refine(data, config, m.stage_dir("refine"), render_event)
        render_history(state.history)
        if state.audits:
            render_audit(state.audits[-1])

    _run(Stage.refine, manifest, body, k=k, metric=metric, iterations=iterations, seed=seed)


def validate_command(
    manifest: ManifestOption,
    k: KOption = None,
    metric: MetricOption = None,
    seed: SeedOption = None,
) -> None:
    """Score the latest checkpoint under the selected metric variant."""

    def body(m: Manifest) -> None:
        root = checkpoint_root(m)
        if root is None:
            logger.info("No checkpoint found; training iteration 0 first")
            config = refine_config(m, iterations=1)
            data = build_features(m, config.cnn_spec.input_size)
            refine(data, config, m.stage_dir("train"), render_event)
            root = m.stage_dir("train")
        for report in rescore_reports(root, m).values():
            render_report(report)

    _run(Stage.validate, manifest, body, k=k, metric=metric, seed=seed)


def export_command(
    manifest: ManifestOption,
    allow_partial: Annotated[
        bool,
        typer.Option("--allow-partial", help="Export covered places when some lack predictions"),
    ] = False,
    svg: Annotated[bool, typer.Option("--svg", help="Also render an SVG map")] = False,
) -> None:
    """Write place-level wealth estimates as CSV, GeoJSON and optionally SVG."""

    def body(m: Manifest) -> None:
        root = checkpoint_root(m)
        if root is None:
            raise UsageError("No predictions yet: run train or refine before export")
        predictions = read_place_predictions(root)
        registry = [p for places in load_registries(m).values() for p in places]
        formats = [ExportFormat.csv, ExportFormat.geojson]
        if svg:
            formats.append(ExportFormat.svg)
        paths = export_maps(predictions, registry, m.stage_dir("export"), formats, allow_partial)
        for path in paths:
            console.print(f"[green]wrote[/green] {path}")

    _run(Stage.export, manifest, body)


def synth_command(
    manifest: Annotated[
        Optional[Path],
        typer.Option("--manifest", help="Manifest whose synth section holds the world spec"),
    ] = None,
    out: Annotated[
        Optional[Path], typer.Option("--out", help="Directory receiving the world")
    ] = None,
    seed: SeedOption = None,
    iterations: IterationsOption = None,
    with_ceiling: Annotated[
        bool, typer.Option("--ceiling", help="Also estimate the achievable R-squared")
    ] = False,
) -> None:
    """Generate a synthetic multi-country world and a manifest to run it."""
    try:
        m = load_manifest(manifest, seed=seed) if manifest is not None else None
        spec = SynthSpec.from_dict(dict(m.synth)) if m is not None else SynthSpec()
        if seed is not None:
            spec = SynthSpec.from_dict({**spec.to_dict(), "seed": seed})
        target = out or (m.stage_dir("synth") if m is not None else DEFAULT_SYNTH_DIR)
        world = generate(spec)
        written = write_world(world, target, iterations=iterations or 7)
        console.print(f"[green]wrote[/green] {written}")
        if with_ceiling:
            console.print(f"ceiling R² [bold]{ceiling(world):.4f}[/bold]")
        append_run_log(target / RUN_LOG, Stage.synth.value, {"seed": spec.seed}, {})
    except UsageError as e:
        render_error(str(e))
        raise typer.Exit(code=EXIT_USAGE)
    except DataError as e:
        render_error(str(e))
        raise typer.Exit(code=EXIT_DATA)


def main(
    ctx: typer.Context,
    version: Annotated[
        bool,
        typer.Option("--version", "-v", help="Show the version and exit", is_eager=True),
    ] = False,
) -> None:
    """POVMAP - village-level poverty maps from geospatial data and imagery"""
    if version:
        typer.echo(__version__)
        raise typer.Exit()
    if ctx.invoked_subcommand is None:
        typer.echo(ctx.get_help())
        raise typer.Exit()


def create_app() -> typer.Typer:
    """
    Create and configure the Typer application.

    Returns:
        Typer application
    """
    # Load the log level and output directory from .env if not already set
    load_envs()
    setup_logging(parse_level(os.environ.get(LOG_LEVEL_ENV)))
    logger.info(
        f"povmap v{__version__} starting up (Python v{sys.version.split()[0]}, PID: {os.getpid()})"
    )

    app = typer.Typer(rich_markup_mode=None)
    app.callback(invoke_without_command=True)(main)
    app.command("iwi")(iwi_command)
    app.command("places")(places_command)
    app.command("features")(features_command)
    app.command("train")(train_command)
    app.command("refine")(refine_command)
    app.command("validate")(validate_command)
    app.command("synth")(synth_command)
    app.command("export")(export_command)
    return app


def run() -> None:
    """Entry point for the CLI."""
    app = create_app()
    app()


if __name__ == "__main__":
    run()
