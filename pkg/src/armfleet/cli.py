"""Main CLI entry point for armfleet."""

import typer
from rich.console import Console
from rich.table import Table

from armfleet import __version__
from armfleet.commands.bench import bench
from armfleet.commands.evaluate import evaluate
from armfleet.commands.replay import replay_check
from armfleet.commands.train import train_policy
from armfleet.commands.worker import worker
from armfleet.core.reacher_env import PRESET_ENVS, get_env_spec

app = typer.Typer(
    name="armfleet",
    help="Distributed PPO training for kinematic robot-arm reacher tasks",
    no_args_is_help=True,
)
console = Console()


def version_callback(value: bool) -> None:
    """Show version and exit."""
    if value:
        console.print(f"armfleet version {__version__}")
        raise typer.Exit()


@app.callback()
def main(
    version: bool | None = typer.Option(
        None, "--version", "-v", help="Show version and exit", callback=version_callback
    ),
) -> None:
    """armfleet - synchronous multi-worker PPO for reacher arms."""
    pass


@app.command()
def info() -> None:
    """Show information about armfleet and its preset tasks."""
    table = Table(title="armfleet Information")
    table.add_column("Property", style="cyan")
    table.add_column("Value", style="green")

    table.add_row("Version", __version__)
    table.add_row("Description", "Distributed PPO for kinematic reacher arms")
    for name in PRESET_ENVS:
        spec = get_env_spec(name)
        table.add_row(
            f"Task {name}",
            f"{spec.chain.dof} joints, observation {spec.observation_dim}, "
            f"action {spec.action_dim}, horizon {spec.horizon}",
        )

    console.print(table)


app.command("train")(train_policy)
app.command("bench")(bench)
app.command("eval")(evaluate)
app.command("replay-check")(replay_check)
app.command("worker")(worker)


if __name__ == "__main__":
    app()
