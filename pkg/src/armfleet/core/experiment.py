"""Worker-count grid runs, threshold analysis, reports and replay checks.

Every (workers, seed) cell lives in ``<output>/<env>/<workers>w_s<seed>/`` with
its curve CSV, final parameters, the run description needed to replay it and a
``cell.yaml`` completion marker. Cells with a marker are skipped on rerun.
"""

import csv
import math
import statistics
from collections.abc import Callable
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, cast

import yaml
from rich.table import Table

from armfleet.core.cluster import (
    ClusterMode,
    SpawnArgs,
    cluster_config_for_workers,
    spawn_cluster,
)
from armfleet.core.coordinator import (
    StopCriterion,
    TrainingAbortedError,
    TrainingMetrics,
    evaluate_policy,
    train,
)
from armfleet.core.errors import ArmfleetError, ConfigError
from armfleet.core.ppo import PpoConfig, preset_config
from armfleet.core.protocol import load_params, save_params
from armfleet.core.reacher_env import PRESET_ENVS, get_env_spec
from armfleet.types import RoundCallback, SummaryRow

SUMMARY_COLUMNS = (
    "env",
    "workers",
    "seed",
    "status",
    "reached",
    "rounds",
    "timesteps",
    "wall_clock_s",
    "stop_reason",
    "time_to_threshold_s",
    "rounds_to_threshold",
    "timesteps_to_threshold",
    "accuracy_mm",
    "repeatability_mm",
    "error",
)
SCALING_COLUMNS = (
    "workers",
    "cells",
    "reached",
    "median_time_to_threshold_s",
    "median_timesteps_to_threshold",
    "median_accuracy_mm",
    "median_repeatability_mm",
)


@dataclass(frozen=True)
class ExperimentPlan:
    """Grid of worker counts and seeds for one environment."""

    env: str
    worker_grid: tuple[int, ...] = (1, 2, 4, 8)
    seeds: tuple[int, ...] = (0, 1, 2)
    cfg: PpoConfig | None = None
    stop: StopCriterion = field(default_factory=StopCriterion)
    output_dir: Path = Path("out")
    mode: ClusterMode = "in-process"
    listen_address: str = "127.0.0.1:0"
    eval_runs: int = 10
    eval_steps: int | None = None
    worker_command: list[str] | None = None

    def __post_init__(self) -> None:
        if self.env not in PRESET_ENVS:
            raise ConfigError(
                f"Unknown environment '{self.env}'. Available: {', '.join(PRESET_ENVS)}"
            )
        if not self.worker_grid or any(w < 1 for w in self.worker_grid):
            raise ConfigError(f"worker_grid must be non-empty and >= 1 (got {self.worker_grid})")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        if self.eval_runs < 2:
            raise ConfigError(f"eval_runs must be >= 2 (got {self.eval_runs})")
        for workers in self.worker_grid:
            cfg = self.config_for(workers)
            if cfg.rollout_target() < cfg.sgd_batchsize:
                raise ConfigError(
                    f"With {workers} workers each collects {cfg.rollout_target()} steps, "
                    f"fewer than sgd_batchsize {cfg.sgd_batchsize}"
                )

    def config_for(self, workers: int) -> PpoConfig:
        if self.cfg is None:
            return preset_config(self.env, workers)
        return replace(self.cfg, num_workers=workers)

    def cells(self) -> list[tuple[int, int]]:
        return [(w, s) for w in self.worker_grid for s in self.seeds]

    def run_dir(self, workers: int, seed: int) -> Path:
        return self.output_dir / self.env / f"{workers}w_s{seed}"


def curve_path(run_dir: Path, workers: int, seed: int) -> Path:
    return run_dir / f"curves_{workers}_{seed}.csv"


@dataclass(frozen=True)
class ThresholdCrossing:
    time_s: float
    round: int
    timesteps: int


def threshold_crossing(metrics: TrainingMetrics, threshold: float) -> ThresholdCrossing | None:
    """First round whose mean reward reaches ``threshold``.

    The crossing time is interpolated linearly between the bracketing rounds;
    the round index and timestep count are those of the first reaching round.
    """
    previous = None
    for row in metrics.rows:
        if row.mean_reward >= threshold:
            if previous is None or row.mean_reward == previous.mean_reward:
                time_s = row.wall_clock_s
            else:
                fraction = (threshold - previous.mean_reward) / (
                    row.mean_reward - previous.mean_reward
                )
                time_s = previous.wall_clock_s + fraction * (
                    row.wall_clock_s - previous.wall_clock_s
                )
            return ThresholdCrossing(time_s=time_s, round=row.round, timesteps=row.timesteps)
        previous = row
    return None


def _base_row(env: str, workers: int, seed: int) -> SummaryRow:
    return SummaryRow(
        env=env,
        workers=workers,
        seed=seed,
        status="ok",
        reached=False,
        rounds=0,
        timesteps=0,
        wall_clock_s=0.0,
        stop_reason="",
    )


def _fill_progress(row: SummaryRow, metrics: TrainingMetrics, threshold: float) -> None:
    if metrics.rows:
        last = metrics.rows[-1]
        row["rounds"] = last.round
        row["timesteps"] = last.timesteps
        row["wall_clock_s"] = last.wall_clock_s
    crossing = threshold_crossing(metrics, threshold)
    if crossing is not None:
        row["reached"] = True
        row["time_to_threshold_s"] = crossing.time_s
        row["rounds_to_threshold"] = crossing.round
        row["timesteps_to_threshold"] = crossing.timesteps


def _run_description(plan: ExperimentPlan, workers: int, seed: int) -> dict[str, Any]:
    return {
        "env": plan.env,
        "workers": workers,
        "seed": seed,
        "mode": plan.mode,
        "ppo": plan.config_for(workers).to_dict(),
        "stop": {
            "reward_threshold": plan.stop.reward_threshold,
            "max_rounds": plan.stop.max_rounds,
            "max_wall_clock_seconds": plan.stop.max_wall_clock_seconds,
        },
        "eval_runs": plan.eval_runs,
        "eval_steps": plan.eval_steps,
    }


def run_cell(
    plan: ExperimentPlan,
    workers: int,
    seed: int,
    on_round: RoundCallback | None = None,
) -> SummaryRow:
    """Train, evaluate and persist one grid cell; failures become failed rows."""
    run_dir = plan.run_dir(workers, seed)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "run.yaml").write_text(
        yaml.safe_dump(_run_description(plan, workers, seed), sort_keys=False),
        encoding="utf-8",
    )

    cfg = plan.config_for(workers)
    row = _base_row(plan.env, workers, seed)
    curves = curve_path(run_dir, workers, seed)
    try:
        env_spec = get_env_spec(plan.env, cfg.horizon)
        args = SpawnArgs(
            env_name=plan.env,
            env_spec=env_spec,
            ppo_config=cfg,
            global_seed=seed,
            worker_command=plan.worker_command,
        )
        cluster_cfg = cluster_config_for_workers(workers, plan.mode, plan.listen_address)
        with spawn_cluster(cluster_cfg, args) as cluster:
            result = train(
                cluster.channels,
                cfg,
                plan.stop,
                seed,
                env_spec,
                metrics_path=curves,
                on_round=on_round,
            )
        save_params(result.params, run_dir / "params.bin")
        row["stop_reason"] = result.stop_reason
        _fill_progress(row, result.metrics, plan.stop.reward_threshold)
        report = evaluate_policy(
            result.params, env_spec, plan.eval_runs, seed, steps=plan.eval_steps
        )
        row["accuracy_mm"] = report.accuracy_mm
        row["repeatability_mm"] = report.repeatability_mm
    except TrainingAbortedError as e:
        row["status"] = "failed"
        row["error"] = str(e)
        _fill_progress(row, e.metrics, plan.stop.reward_threshold)
    except ArmfleetError as e:
        row["status"] = "failed"
        row["error"] = str(e)
        if not curves.exists():
            TrainingMetrics().write_csv(curves)

    # failed cells leave no marker so the next run retries them
    if row["status"] == "ok":
        (run_dir / "cell.yaml").write_text(
            yaml.safe_dump(dict(row), sort_keys=False), encoding="utf-8"
        )
    return row


def load_cell(run_dir: Path) -> SummaryRow | None:
    marker = run_dir / "cell.yaml"
    if not marker.exists():
        return None
    data = yaml.safe_load(marker.read_text(encoding="utf-8"))
    if not isinstance(data, dict):
        return None
    row = cast(SummaryRow, data)
    return row if row.get("status") == "ok" else None


@dataclass
class ExperimentSummary:
    cells: list[SummaryRow] = field(default_factory=list[SummaryRow])

    def scaling_rows(self) -> list[dict[str, Any]]:
        """Per worker count medians over the cells that reached the threshold."""
        rows: list[dict[str, Any]] = []
        for workers in sorted({c["workers"] for c in self.cells}):
            group = [c for c in self.cells if c["workers"] == workers]
            reached = [c for c in group if c["reached"]]
            evaluated = [c for c in group if "accuracy_mm" in c]

            def median(values: list[float]) -> float | None:
                return statistics.median(values) if values else None

            rows.append(
                {
                    "workers": workers,
                    "cells": len(group),
                    "reached": len(reached),
                    "median_time_to_threshold_s": median(
                        [c.get("time_to_threshold_s", math.nan) for c in reached]
                    ),
                    "median_timesteps_to_threshold": median(
                        [float(c.get("timesteps_to_threshold", 0)) for c in reached]
                    ),
                    "median_accuracy_mm": median(
                        [c.get("accuracy_mm", math.nan) for c in evaluated]
                    ),
                    "median_repeatability_mm": median(
                        [c.get("repeatability_mm", math.nan) for c in evaluated]
                    ),
                }
            )
        return rows


def _cell_text(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_table(path: Path, columns: tuple[str, ...], rows: list[dict[str, Any]]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell_text(row.get(c)) for c in columns])
    return path


def write_summary(summary: ExperimentSummary, output_dir: Path) -> tuple[Path, Path]:
    """Write ``summary.csv`` and ``scaling.csv`` into ``output_dir``."""
    cells = [cast(dict[str, Any], dict(c)) for c in summary.cells]
    return (
        _write_table(output_dir / "summary.csv", SUMMARY_COLUMNS, cells),
        _write_table(output_dir / "scaling.csv", SCALING_COLUMNS, summary.scaling_rows()),
    )


def run_experiment(
    plan: ExperimentPlan,
    on_cell: Callable[[int, int, SummaryRow, bool], None] | None = None,
    on_round: RoundCallback | None = None,
) -> ExperimentSummary:
    """Run every grid cell in sequence; completed cells are reused.

    ``on_cell`` receives (workers, seed, row, reused) after each cell.
    """
    summary = ExperimentSummary()
    for workers, seed in plan.cells():
        existing = load_cell(plan.run_dir(workers, seed))
        if existing is not None:
            summary.cells.append(existing)
            if on_cell is not None:
                on_cell(workers, seed, existing, True)
            continue
        row = run_cell(plan, workers, seed, on_round)
        summary.cells.append(row)
        if on_cell is not None:
            on_cell(workers, seed, row, False)
    write_summary(summary, plan.output_dir / plan.env)
    return summary


def _fmt(value: Any, digits: int = 2) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.{digits}f}"
    return str(value)


def report(summary: ExperimentSummary, output_dir: Path | None = None) -> Table:
    """Accuracy/repeatability and time-to-threshold table, one row per cell."""
    table = Table(title="Experiment Summary")
    table.add_column("Workers", justify="right", style="cyan")
    table.add_column("Seed", justify="right")
    table.add_column("Accuracy (mm)", justify="right", style="green")
    table.add_column("Repeatability (mm)", justify="right", style="green")
    table.add_column("Time to threshold (s)", justify="right", style="yellow")
    table.add_column("Timesteps to threshold", justify="right", style="yellow")
    table.add_column("Status")

    for cell in sorted(summary.cells, key=lambda c: (c["workers"], c["seed"])):
        status = "[green]✓[/green]" if cell["status"] == "ok" else "[red]✗ failed[/red]"
        table.add_row(
            str(cell["workers"]),
            str(cell["seed"]),
            _fmt(cell.get("accuracy_mm")),
            _fmt(cell.get("repeatability_mm")),
            _fmt(cell.get("time_to_threshold_s"), 1),
            _fmt(cell.get("timesteps_to_threshold")),
            status,
        )
    if output_dir is not None:
        write_summary(summary, output_dir)
    return table


# Replay


@dataclass(frozen=True)
class ReplayResult:
    identical: bool
    rounds: int
    differences: list[str]


def replay_run(run_dir: Path) -> ReplayResult:
    """Rerun a finished cell in-process and diff it against its artifacts.

    Every metrics column except wall_clock_s and the final parameter digest
    must match bit for bit.
    """
    description_path = run_dir / "run.yaml"
    if not description_path.exists():
        raise ConfigError(f"{run_dir} has no run.yaml")
    description = cast(dict[str, Any], yaml.safe_load(description_path.read_text(encoding="utf-8")))
    workers = int(description["workers"])
    seed = int(description["seed"])
    env = str(description["env"])
    cfg = PpoConfig.from_dict(cast(dict[str, Any], description["ppo"]))
    recorded = TrainingMetrics.read_csv(curve_path(run_dir, workers, seed))
    stop_data = cast(dict[str, Any], description["stop"])
    stop = StopCriterion(
        reward_threshold=float(stop_data["reward_threshold"]),
        max_rounds=len(recorded),
    )

    env_spec = get_env_spec(env, cfg.horizon)
    args = SpawnArgs(env_name=env, env_spec=env_spec, ppo_config=cfg, global_seed=seed)
    with spawn_cluster(cluster_config_for_workers(workers), args) as cluster:
        result = train(cluster.channels, cfg, stop, seed, env_spec)

    differences: list[str] = []
    if len(result.metrics) != len(recorded):
        differences.append(f"rounds: recorded {len(recorded)}, replayed {len(result.metrics)}")
    for old, new in zip(recorded.rows, result.metrics.rows, strict=False):
        for column in ("round", "timesteps", "mean_reward", "workers", "seed"):
            if getattr(old, column) != getattr(new, column):
                differences.append(
                    f"round {old.round} {column}: {getattr(old, column)!r} != "
                    f"{getattr(new, column)!r}"
                )
    params_path = run_dir / "params.bin"
    if params_path.exists():
        if load_params(params_path).digest() != result.params.digest():
            differences.append("final parameters differ")
    else:
        differences.append("params.bin is missing")
    return ReplayResult(
        identical=not differences, rounds=len(result.metrics), differences=differences
    )
