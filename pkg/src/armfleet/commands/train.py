"""Single training run command."""

import math
from pathlib import Path

import typer
from rich.console import Console
from rich.progress import BarColumn, MofNCompleteColumn, Progress, SpinnerColumn, TextColumn

from armfleet.core.cluster import load_cluster_config, parse_mode
from armfleet.core.coordinator import StopCriterion
from armfleet.core.errors import ArmfleetError
from armfleet.core.experiment import (
    ExperimentPlan,
    ExperimentSummary,
    curve_path,
    report,
    run_cell,
)
from armfleet.core.ppo import PpoConfig

console = Console()


def train_policy(
    env: str = typer.Option("scara3", "--env", "-e", help="Task: scara3 or arm6"),
    workers: int = typer.Option(1, "--workers", "-w", help="Number of rollout workers"),
    config: Path | None = typer.Option(
        None, "--config", "-c", help="PPO hyperparameter YAML (defaults to the env preset)"
    ),
    cluster: Path | None = typer.Option(
        None, "--cluster", help="Cluster YAML; its replicas x workers_per_replica sets --workers"
    ),
    seed: int = typer.Option(0, "--seed", "-s", help="Global seed"),
    out: Path = typer.Option(Path("out"), "--out", "-o", help="Output directory"),
    max_rounds: int = typer.Option(300, "--max-rounds", help="Stop after this many rounds"),
    max_wall_clock: float = typer.Option(
        math.inf, "--max-wall-clock", help="Stop after this many seconds"
    ),
    reward_threshold: float = typer.Option(
        -0.01, "--reward-threshold", help="Stop once the mean episode reward reaches this"
    ),
    mode: str | None = typer.Option(
        None,
        "--mode",
        envvar="ARMFLEET_MODE",
        help="in-process, local-processes or remote (or set ARMFLEET_MODE)",
    ),
    eval_runs: int = typer.Option(10, "--eval-runs", help="Evaluation runs after training"),
    eval_steps: int | None = typer.Option(
        None, "--eval-steps", help="Steps per evaluation run (defaults to the horizon)"
    ),
) -> None:
    """Train one policy on a cluster and evaluate it."""
    try:
        cfg = PpoConfig.load(config) if config else None
        listen_address = "127.0.0.1:0"
        resolved_mode = mode or "in-process"
        if cluster is not None:
            cluster_cfg = load_cluster_config(cluster)
            workers = cluster_cfg.total_workers
            listen_address = cluster_cfg.listen_address
            resolved_mode = mode or cluster_cfg.mode
            console.print(f"[blue]Cluster: {cluster_cfg.describe()}[/blue]")

        plan = ExperimentPlan(
            env=env,
            worker_grid=(workers,),
            seeds=(seed,),
            cfg=cfg,
            stop=StopCriterion(
                reward_threshold=reward_threshold,
                max_rounds=max_rounds,
                max_wall_clock_seconds=max_wall_clock,
            ),
            output_dir=out,
            mode=parse_mode(resolved_mode),
            listen_address=listen_address,
            eval_runs=eval_runs,
            eval_steps=eval_steps,
        )
        console.print(
            f"[blue]Training {env} with {workers} worker(s), seed {seed}, "
            f"mode {plan.mode}...[/blue]"
        )

        with Progress(
            SpinnerColumn(),
            TextColumn("[progress.description]{task.description}"),
            BarColumn(),
            MofNCompleteColumn(),
            console=console,
        ) as progress:
            task = progress.add_task("Round 0", total=max_rounds or None)

            def on_round(round_index: int, mean_reward: float, timesteps: int) -> None:
                progress.update(
                    task,
                    completed=round_index,
                    description=f"Round {round_index}: reward {mean_reward:.4f}, "
                    f"{timesteps} steps",
                )

            row = run_cell(plan, workers, seed, on_round)

    except ArmfleetError as e:
        console.print(f"[red]✗ {e}[/red]")
        raise typer.Exit(e.exit_code) from e

    run_dir = plan.run_dir(workers, seed)
    console.print(report(ExperimentSummary(cells=[row])))
    if row["status"] != "ok":
        console.print(f"[red]✗ Run failed: {row.get('error', 'unknown error')}[/red]")
        raise typer.Exit(1)

    if row["reached"]:
        console.print(
            f"[green]✓ Reached {reward_threshold} after {row.get('rounds_to_threshold')} "
            f"rounds ({row.get('time_to_threshold_s', 0.0):.1f}s)[/green]"
        )
    else:
        console.print(
            f"[yellow]⚠ Threshold not reached ({row['stop_reason']} after "
            f"{row['rounds']} rounds)[/yellow]"
        )
    console.print(f"Curve: [link]{curve_path(run_dir, workers, seed)}[/link]")
    console.print(f"Parameters: [link]{run_dir / 'params.bin'}[/link]")

