"""Unit tests for grid runs, threshold analysis and replay."""

import csv
from dataclasses import replace

import pytest
import yaml

from armfleet.core.cluster import SpawnError
from armfleet.core.coordinator import (
    METRICS_HEADER,
    MetricsRow,
    StopCriterion,
    TrainingMetrics,
)
from armfleet.core.errors import ConfigError
from armfleet.core.experiment import (
    SCALING_COLUMNS,
    SUMMARY_COLUMNS,
    ExperimentPlan,
    curve_path,
    replay_run,
    report,
    run_experiment,
    threshold_crossing,
)


def _metrics(*rows):
    metrics = TrainingMetrics()
    for i, (wall, reward) in enumerate(rows, start=1):
        metrics.append(MetricsRow(i, i * 100, wall, reward, 1, 0))
    return metrics


@pytest.fixture
def plan(tmp_path, tiny_config):
    return ExperimentPlan(
        env="scara3",
        worker_grid=(1, 2),
        seeds=(0,),
        cfg=tiny_config,
        stop=StopCriterion(max_rounds=1),
        output_dir=tmp_path / "out",
        eval_runs=2,
        eval_steps=4,
    )


class TestThresholdCrossing:
    """Test time-to-threshold interpolation."""

    def test_interpolates_between_rounds(self):
        crossing = threshold_crossing(_metrics((1.0, -0.5), (3.0, -0.1)), -0.2)
        assert crossing is not None
        assert crossing.time_s == pytest.approx(2.5)
        assert crossing.round == 2
        assert crossing.timesteps == 200

    def test_first_round_reaches(self):
        crossing = threshold_crossing(_metrics((1.5, -0.01), (2.0, -0.005)), -0.02)
        assert crossing is not None
        assert crossing.time_s == 1.5
        assert crossing.round == 1

    def test_never_reached(self):
        assert threshold_crossing(_metrics((1.0, -0.5), (2.0, -0.4)), -0.2) is None
        assert threshold_crossing(TrainingMetrics(), -0.2) is None


class TestExperimentPlan:
    """Test plan validation."""

    def test_unknown_env(self):
        with pytest.raises(ConfigError, match="Unknown environment"):
            ExperimentPlan(env="hexapod")

    def test_eval_runs(self):
        with pytest.raises(ConfigError, match="eval_runs"):
            ExperimentPlan(env="scara3", eval_runs=1)

    def test_rollout_smaller_than_minibatch(self, tiny_config):
        cfg = replace(tiny_config, sgd_batchsize=32)
        with pytest.raises(ConfigError, match="sgd_batchsize"):
            ExperimentPlan(env="scara3", worker_grid=(1, 4), cfg=cfg)

    def test_cells_and_paths(self, plan, tmp_path):
        assert plan.cells() == [(1, 0), (2, 0)]
        assert plan.run_dir(2, 0) == tmp_path / "out" / "scara3" / "2w_s0"
        assert curve_path(plan.run_dir(2, 0), 2, 0).name == "curves_2_0.csv"
        assert plan.config_for(2).num_workers == 2

    def test_preset_config_when_none_given(self):
        assert ExperimentPlan(env="scara3").config_for(4).num_workers == 4


class TestRunExperiment:
    """Test a small grid end to end with in-process workers."""

    def test_zero_rounds(self, plan):
        vacuous = replace(plan, worker_grid=(1,), seeds=(7,), stop=StopCriterion(max_rounds=0))
        summary = run_experiment(vacuous)
        (row,) = summary.cells
        assert row["status"] == "ok"
        assert row["reached"] is False
        assert "time_to_threshold_s" not in row
        curves = curve_path(plan.run_dir(1, 7), 1, 7)
        assert curves.read_text().splitlines() == [",".join(METRICS_HEADER)]

    def test_writes_artifacts(self, plan):
        seen = []
        summary = run_experiment(plan, on_cell=lambda w, s, row, reused: seen.append((w, reused)))
        assert seen == [(1, False), (2, False)]
        assert [c["status"] for c in summary.cells] == ["ok", "ok"]

        for workers in (1, 2):
            run_dir = plan.run_dir(workers, 0)
            assert (run_dir / "params.bin").exists()
            assert (run_dir / "run.yaml").exists()
            assert len(TrainingMetrics.read_csv(curve_path(run_dir, workers, 0))) == 1
            cell = yaml.safe_load((run_dir / "cell.yaml").read_text())
            assert cell["accuracy_mm"] > 0.0

        env_dir = plan.output_dir / "scara3"
        with (env_dir / "summary.csv").open(newline="") as handle:
            rows = list(csv.reader(handle))
        assert tuple(rows[0]) == SUMMARY_COLUMNS
        assert len(rows) == 3
        with (env_dir / "scaling.csv").open(newline="") as handle:
            assert tuple(next(csv.reader(handle))) == SCALING_COLUMNS

    def test_completed_cells_are_reused(self, plan):
        run_experiment(plan)
        seen = []
        summary = run_experiment(plan, on_cell=lambda w, s, row, reused: seen.append(reused))
        assert seen == [True, True]
        assert len(summary.cells) == 2

    def test_failed_cells_are_retried(self, plan, mocker):
        single = replace(plan, worker_grid=(1,))
        mocker.patch(
            "armfleet.core.experiment.spawn_cluster",
            side_effect=SpawnError("Worker binary not found", "spawn"),
        )
        (failed,) = run_experiment(single).cells
        assert failed["status"] == "failed"
        assert "Worker binary not found" in failed["error"]
        assert not (plan.run_dir(1, 0) / "cell.yaml").exists()

        mocker.stopall()
        seen = []
        summary = run_experiment(single, on_cell=lambda w, s, row, reused: seen.append(reused))
        assert seen == [False]
        assert summary.cells[0]["status"] == "ok"
        assert (plan.run_dir(1, 0) / "cell.yaml").exists()

    def test_report(self, plan):
        summary = run_experiment(plan)
        table = report(summary)
        assert table.title == "Experiment Summary"
        assert table.row_count == 2
        scaling = summary.scaling_rows()
        assert [r["workers"] for r in scaling] == [1, 2]
        assert all(r["cells"] == 1 for r in scaling)


class TestReplay:
    def test_replay_is_identical(self, plan):
        run_experiment(replace(plan, worker_grid=(2,)))
        result = replay_run(plan.run_dir(2, 0))
        assert result.identical, result.differences
        assert result.rounds == 1

    def test_missing_params_file(self, plan):
        run_experiment(replace(plan, worker_grid=(1,)))
        run_dir = plan.run_dir(1, 0)
        (run_dir / "params.bin").unlink()
        result = replay_run(run_dir)
        assert not result.identical
        assert "params.bin is missing" in result.differences

    def test_missing_description(self, tmp_path):
        with pytest.raises(ConfigError):
            replay_run(tmp_path)
