from collections.abc import Sequence
from typing import Optional

from rich.console import Console
from rich.table import Table
from rich.text import Text
from rich.tree import Tree

from povmap.refine.events import (
    ClassifierTrained,
    EstimatorChosen,
    IterationFinished,
    IterationStarted,
    NarrowingApplied,
    ProtocolScored,
    RefineEvent,
    RefineStopped,
)
from povmap.refine.state import AuditReport, IterationMetrics
from povmap.validate import ValidationReport

console = Console()


def _r2(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{value:.4f}"


def render_event(event: RefineEvent) -> None:
    """Render a refinement progress event with rich formatting."""
    match event:
        case IterationStarted(iteration=i, active_columns=cols, training_clusters=n):
            console.print(
                Text(f"▶ Iteration {i}", style="bold")
                + Text(f"  {n} clusters, {cols} feature columns", style="dim")
            )

        case ProtocolScored(protocol=protocol, mean=mean, units=units):
            root = Tree(Text(f"{protocol}: ") + Text(_r2(mean), style="bold green"))
            if len(units) > 1:
                for unit, value in sorted(units.items()):
                    root.add(Text(f"{unit} {value:.4f}", style="dim"))
            console.print(root)

        case EstimatorChosen(country=country, estimator=estimator, single=s, cross=c):
            console.print(
                f"  [dim]{country}:[/dim] {estimator} "
                f"[dim](single {_r2(s)}, cross {_r2(c)})[/dim]"
            )

        case ClassifierTrained(tiles=tiles, warm_started=warm, final_loss=loss):
            how = "warm-started" if warm else "from scratch"
            loss_text = "n/a" if loss is None else f"{loss:.4f}"
            console.print(f"  [dim]image classifier {how} on {tiles} tiles, loss {loss_text}[/dim]")

        case NarrowingApplied(narrowed=narrowed, skipped=skipped):
            console.print(f"  [dim]narrowed {narrowed} clusters, {skipped} skipped[/dim]")

        case IterationFinished(iteration=i, headline=headline, violations=violations):
            style = "red" if violations else "green"
            console.print(
                Text(f"  iteration {i} R² ") + Text(_r2(headline), style="bold")
                + Text(f"  audit: {violations} violation(s)", style=style)
            )
            console.print()

        case RefineStopped(iteration=i, reason=reason):
            console.print(Text(f"Stopped after iteration {i}: {reason}", style="yellow"))
            console.print()


def history_table(history: Sequence[IterationMetrics]) -> Table:
    table = Table(title="Refinement history")
    table.add_column("iter", justify="right")
    table.add_column("single", justify="right")
    table.add_column("cross", justify="right")
    table.add_column("pooled", justify="right")
    table.add_column("clusters", justify="right")
    for m in history:
        table.add_row(
            str(m.iteration),
            _r2(m.single_mean),
            _r2(m.cross_mean),
            _r2(m.pooled),
            str(m.training_clusters),
        )
    return table


def render_history(history: Sequence[IterationMetrics]) -> None:
    console.print(history_table(history))


def render_report(report: ValidationReport) -> None:
    """Per-unit scores of one validation report."""
    table = Table(title=f"{report.protocol} ({report.variant.value})")
    table.add_column("unit")
    table.add_column("R²", justify="right")
    table.add_column("n", justify="right")
    scores = report.scores()
    for unit, score in sorted(report.units.items()):
        table.add_row(unit, _r2(scores.get(unit)), str(score.n))
    for unit, reason in sorted(report.excluded.items()):
        table.add_row(Text(unit, style="dim"), Text(reason, style="dim"), "")
    console.print(table)
    console.print(f"[bold]mean[/bold] {_r2(report.mean)}")
    console.print()


def render_audit(report: AuditReport) -> None:
    if report.clean:
        console.print(
            f"[green]Leakage audit clean[/green] [dim]({report.checked_runs} models, "
            f"{report.checked_labels} labels)[/dim]"
        )
        return
    root = Tree(Text(f"Leakage audit: {len(report.violations)} violation(s)", style="bold red"))
    for violation in report.violations:
        root.add(Text(violation, style="red"))
    console.print(root)


def render_error(message: str) -> None:
    console.print(Text("Error", style="bold red"))
    console.print(f"  {message}")
    console.print()
