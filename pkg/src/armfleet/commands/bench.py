"""Worker-count grid benchmark command."""

import math
from pathlib import Path

import typer
from rich.console import Console
from rich.progress import BarColumn, MofNCompleteColumn, Progress, SpinnerColumn, TextColumn

from armfleet.core.cluster import parse_mode
from armfleet.core.coordinator import StopCriterion
from armfleet.core.errors import ArmfleetError, ConfigError
from armfleet.core.experiment import ExperimentPlan, report, run_experiment
from armfleet.core.ppo import PpoConfig
from armfleet.types import SummaryRow

console = Console()


def parse_worker_grid(text: str) -> tuple[int, ...]:
    """Parse a comma separated list such as ``1,2,4,8``."""
    try:
        grid = tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError as e:
        raise ConfigError(f"Invalid worker list '{text}': expected integers like 1,2,4,8") from e
    if not grid:
        raise ConfigError("Worker list must not be empty")
    return grid


def bench(
    env: str = typer.Option("scara3", "--env", "-e", help="Task: scara3 or arm6"),
    workers: str = typer.Option("1,2,4,8", "--workers", "-w", help="Worker counts to compare"),
    seeds: int = typer.Option(3, "--seeds", help="Number of seeds per worker count"),
    seed_base: int = typer.Option(0, "--seed-base", help="First seed of the range"),
    config: Path | None = typer.Option(
        None, "--config", "-c", help="PPO hyperparameter YAML (defaults to the env preset)"
    ),
    out: Path = typer.Option(Path("out"), "--out", "-o", help="Output directory"),
    max_rounds: int = typer.Option(300, "--max-rounds", help="Round limit per run"),
    max_wall_clock: float = typer.Option(
        math.inf, "--max-wall-clock", help="Wall-clock limit per run in seconds"
    ),
    reward_threshold: float = typer.Option(
        -0.01, "--reward-threshold", help="Mean episode reward that ends a run"
    ),
    mode: str = typer.Option(
        "in-process",
        "--mode",
        envvar="ARMFLEET_MODE",
        help="in-process or local-processes (or set ARMFLEET_MODE)",
    ),
    eval_runs: int = typer.Option(10, "--eval-runs", help="Evaluation runs per trained policy"),
    eval_steps: int | None = typer.Option(
        None, "--eval-steps", help="Steps per evaluation run (defaults to the horizon)"
    ),
) -> None:
    """Run a (workers x seeds) grid and report scaling and accuracy.

    Finished cells are kept, so an interrupted grid resumes where it stopped.
    """
    try:
        if seeds < 1:
            raise ConfigError(f"--seeds must be >= 1 (got {seeds})")
        plan = ExperimentPlan(
            env=env,
            worker_grid=parse_worker_grid(workers),
            seeds=tuple(range(seed_base, seed_base + seeds)),
            cfg=PpoConfig.load(config) if config else None,
            stop=StopCriterion(
                reward_threshold=reward_threshold,
                max_rounds=max_rounds,
                max_wall_clock_seconds=max_wall_clock,
            ),
            output_dir=out,
            mode=parse_mode(mode),
            eval_runs=eval_runs,
            eval_steps=eval_steps,
        )
    except ArmfleetError as e:
        console.print(f"[red]✗ {e}[/red]")
        raise typer.Exit(e.exit_code) from e

    cells = plan.cells()
    console.print(
        f"[blue]Benchmarking {env}: workers {list(plan.worker_grid)} x "
        f"{len(plan.seeds)} seeds ({len(cells)} runs)[/blue]"
    )

    with Progress(
        SpinnerColumn(),
        TextColumn("[progress.description]{task.description}"),
        BarColumn(),
        MofNCompleteColumn(),
        console=console,
    ) as progress:
        task = progress.add_task("Running grid...", total=len(cells))

        def on_cell(workers: int, seed: int, row: SummaryRow, reused: bool) -> None:
            if reused:
                progress.console.print(f"[dim]Reusing {workers}w seed {seed}[/dim]")
            elif row["status"] != "ok":
                progress.console.print(
                    f"[red]✗ {workers}w seed {seed} failed: {row.get('error', '')}[/red]"
                )
            progress.advance(task)

        summary = run_experiment(plan, on_cell=on_cell)

    console.print(report(summary))
    summary_dir = out / env
    console.print(f"\n[bold]Summary saved to: [link]{summary_dir / 'summary.csv'}[/link][/bold]")

    failed = [c for c in summary.cells if c["status"] != "ok"]
    if failed:
        console.print(f"[red]✗ {len(failed)} of {len(cells)} runs failed[/red]")
        raise typer.Exit(1)
    console.print(f"[green]✓ {len(cells)} runs complete[/green]")
