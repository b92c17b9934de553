"""Accuracy and repeatability evaluation of saved parameters."""

from pathlib import Path

import typer
import yaml
from rich.console import Console
from rich.table import Table

from armfleet.core.coordinator import evaluate_policy
from armfleet.core.errors import ArmfleetError
from armfleet.core.protocol import load_params
from armfleet.core.reacher_env import get_env_spec

console = Console()


def evaluate(
    params: Path = typer.Option(..., "--params", "-p", help="Parameter file (params.bin)"),
    env: str = typer.Option("scara3", "--env", "-e", help="Task the policy was trained on"),
    runs: int = typer.Option(10, "--runs", "-n", help="Evaluation runs (at least 2)"),
    seed: int = typer.Option(0, "--seed", "-s", help="Seed for target and start perturbations"),
    steps: int | None = typer.Option(
        None, "--steps", help="Steps per run (defaults to the horizon)"
    ),
    output: Path | None = typer.Option(
        None, "--output", "-o", help="Write the report as YAML to this file"
    ),
) -> None:
    """Report accuracy and repeatability (in mm) of a trained policy."""
    if runs < 2:
        console.print("[red]✗ --runs must be at least 2: repeatability needs two runs[/red]")
        raise typer.Exit(2)

    try:
        if not params.exists():
            console.print(f"[red]✗ Parameter file not found: {params}[/red]")
            raise typer.Exit(2)
        theta = load_params(params)
        spec = get_env_spec(env)
        console.print(f"[blue]Evaluating {params} on {env} over {runs} runs...[/blue]")
        result = evaluate_policy(theta, spec, n_runs=runs, seed=seed, steps=steps)
    except ArmfleetError as e:
        console.print(f"[red]✗ {e}[/red]")
        raise typer.Exit(e.exit_code) from e

    table = Table(title=f"Accuracy and repeatability ({env}, {runs} runs)")
    table.add_column("Metric", style="cyan")
    table.add_column("Value (mm)", justify="right", style="green")
    table.add_row("Accuracy", f"{result.accuracy_mm:.2f}")
    table.add_row("Repeatability", f"{result.repeatability_mm:.2f}")
    console.print(table)
    console.print(f"Target: {[round(float(v), 4) for v in result.targets[0]]}")

    if output:
        document = {
            "env": env,
            "runs": runs,
            "seed": seed,
            "accuracy_mm": result.accuracy_mm,
            "repeatability_mm": result.repeatability_mm,
            "target": [float(v) for v in result.targets[0]],
            "final_positions": [[float(v) for v in p] for p in result.final_positions],
        }
        output.parent.mkdir(parents=True, exist_ok=True)
        output.write_text(yaml.safe_dump(document, sort_keys=False), encoding="utf-8")
        console.print(f"[green]✓ Report saved to {output}[/green]")
