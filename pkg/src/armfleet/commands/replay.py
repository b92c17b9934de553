"""Determinism check: rerun a finished run and diff its metrics."""

from pathlib import Path

import typer
from rich.console import Console

from armfleet.core.errors import ArmfleetError
from armfleet.core.experiment import replay_run

console = Console()


def replay_check(
    run_dir: Path = typer.Argument(help="Run directory such as out/scara3/1w_s0"),
) -> None:
    """Re-run a seed in-process and compare metrics and final parameters bit for bit."""
    try:
        console.print(f"[blue]Replaying {run_dir}...[/blue]")
        result = replay_run(run_dir)
    except ArmfleetError as e:
        console.print(f"[red]✗ {e}[/red]")
        raise typer.Exit(e.exit_code) from e
    except (OSError, KeyError, ValueError) as e:
        console.print(f"[red]✗ Cannot read run artifacts in {run_dir}: {e}[/red]")
        raise typer.Exit(2) from e

    if result.identical:
        console.print(f"[green]✓ identical ({result.rounds} rounds)[/green]")
        return

    console.print(f"[red]✗ Replay differs in {len(result.differences)} place(s):[/red]")
    for difference in result.differences[:20]:
        console.print(f"  • {difference}")
    raise typer.Exit(1)
