"""Worker process entry point."""

from pathlib import Path

import typer
from rich.console import Console

from armfleet.core.channel import connect_channel
from armfleet.core.errors import ArmfleetError
from armfleet.core.ppo import PpoConfig
from armfleet.core.worker import run_worker_session

console = Console(stderr=True)


def worker(
    connect: str = typer.Option(..., "--connect", help="Coordinator address host:port"),
    worker_id: int | None = typer.Option(
        None, "--worker-id", help="Requested worker id (the coordinator may reassign it)"
    ),
    env: str = typer.Option("scara3", "--env", "-e", help="Task this worker expects"),
    config: Path | None = typer.Option(
        None, "--config", "-c", help="PPO config expected from the coordinator"
    ),
    seed: int | None = typer.Option(None, "--seed", "-s", help="Seed expected from the coordinator"),
) -> None:
    """Connect to a coordinator and serve rounds until Shutdown."""
    try:
        declared = PpoConfig.load(config) if config else None
        channel = connect_channel(connect)
    except ArmfleetError as e:
        console.print(f"[red]✗ {e}[/red]")
        raise typer.Exit(e.exit_code) from e

    code = run_worker_session(channel, worker_id, env, declared, seed)
    raise typer.Exit(code)
