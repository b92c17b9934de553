"""Unit tests for rollout collection, local updates and the worker loop."""

import threading
from dataclasses import replace

import msgpack
import numpy as np
import pytest

from armfleet.core.channel import queue_channel_pair
from armfleet.core.policy import MlpSpec, init_params
from armfleet.core.protocol import (
    Frame,
    MsgType,
    PeerError,
    check_error,
    params_frame,
    parse_ack,
    parse_local_model,
    shutdown_frame,
)
from armfleet.core.reacher_env import get_env_spec
from armfleet.core.worker import (
    WorkerState,
    collect_rollouts,
    local_update,
    run_round,
    worker_serve,
)


@pytest.fixture
def worker(scara_spec, tiny_config):
    return WorkerState.create(0, scara_spec, tiny_config, global_seed=7)


def _serve_in_thread(channel, worker):
    result = {}

    def target():
        result["code"] = worker_serve(channel, worker)

    thread = threading.Thread(target=target, daemon=True)
    thread.start()
    return thread, result


class TestCollectRollouts:
    """Test experience collection."""

    def test_whole_episodes(self, worker):
        """Test that collection stops at the first episode end past the quota."""
        batch = collect_rollouts(worker, 20)
        assert batch.episode_boundaries == (16, 32)
        assert batch.total_steps == 32
        assert batch.observations.shape == (32, 9)
        assert batch.actions.shape == (32, 3)
        assert np.all(batch.rewards <= 0.0)

    def test_reproducible(self, worker):
        a = collect_rollouts(worker, 16)
        b = collect_rollouts(worker, 16)
        np.testing.assert_array_equal(a.rewards, b.rewards)
        np.testing.assert_array_equal(a.actions, b.actions)

    def test_streams_differ_per_worker(self, scara_spec, tiny_config):
        first = WorkerState.create(0, scara_spec, tiny_config, global_seed=7)
        second = WorkerState.create(1, scara_spec, tiny_config, global_seed=7)
        a = collect_rollouts(first, 16)
        b = collect_rollouts(second, 16)
        assert not np.array_equal(a.actions, b.actions)

    def test_single_step_quota(self, tiny_config):
        """Test that one required step still yields one whole episode."""
        worker = WorkerState.create(0, get_env_spec("scara3", 5), tiny_config, global_seed=1)
        batch = collect_rollouts(worker, 1)
        assert batch.total_steps == 5
        assert batch.episode_boundaries == (5,)

    @pytest.mark.parametrize("min_steps", [1, 15, 16, 17, 40])
    def test_step_count_bounds(self, worker, min_steps):
        batch = collect_rollouts(worker, min_steps)
        assert min_steps <= batch.total_steps < min_steps + worker.spec.horizon

    def test_streams_differ_per_round(self, worker):
        a = collect_rollouts(worker, 16)
        worker.round = 1
        b = collect_rollouts(worker, 16)
        assert not np.array_equal(a.actions, b.actions)


class TestLocalUpdate:
    """Test the worker-side learner."""

    def test_update_replaces_params(self, worker):
        before = worker.params
        batch = collect_rollouts(worker, worker.cfg.rollout_target())
        params = local_update(worker, batch)
        assert worker.params is params
        assert params.version == before.version + 1
        assert params.digest() != before.digest()
        assert 1 <= len(worker.last_epochs) <= worker.cfg.num_sgd_iter

    def test_kl_coefficient_adapts(self, worker):
        batch = collect_rollouts(worker, worker.cfg.rollout_target())
        local_update(worker, batch)
        assert worker.cfg.kl_coeff in (0.1, 0.2, 0.4)

    def test_run_round_stats(self, worker):
        stats = run_round(worker)
        assert stats["worker_id"] == 0
        assert stats["round"] == 0
        assert stats["total_steps"] == 32
        assert stats["cumulative_steps"] == 32
        assert stats["episodes"] == 2
        assert stats["mean_episode_reward"] < 0.0

    def test_local_rounds(self, scara_spec, tiny_config):
        worker = WorkerState.create(0, scara_spec, replace(tiny_config, local_rounds=2), 7)
        stats = run_round(worker)
        assert stats["total_steps"] == 64
        assert worker.params.version == 2


class TestWorkerServe:
    """Test the round loop over an in-process channel."""

    def test_round_then_shutdown(self, worker):
        coordinator, worker_end = queue_channel_pair()
        thread, result = _serve_in_thread(worker_end, worker)
        params = worker.params

        coordinator.send(params_frame(params, 0))
        ack = parse_ack(coordinator.receive(timeout=30))
        assert ack["digest"] == params.digest()
        assert ack["round"] == 0
        local, stats = parse_local_model(coordinator.receive(timeout=60))
        assert stats["round"] == 0
        assert local.manifest == params.manifest

        coordinator.send(shutdown_frame())
        thread.join(timeout=30)
        assert result["code"] == 0

    def test_two_rounds_accumulate_steps(self, worker):
        coordinator, worker_end = queue_channel_pair()
        thread, result = _serve_in_thread(worker_end, worker)
        params = worker.params
        cumulative = []
        for round_index in range(2):
            coordinator.send(params_frame(params, round_index))
            assert parse_ack(coordinator.receive(timeout=30))["round"] == round_index
            params, stats = parse_local_model(coordinator.receive(timeout=60))
            assert stats["round"] == round_index
            assert stats["total_steps"] == 32
            cumulative.append(stats["cumulative_steps"])
        assert cumulative == [32, 64]

        coordinator.send(shutdown_frame())
        thread.join(timeout=30)
        assert result["code"] == 0

    def test_foreign_manifest(self, worker):
        coordinator, worker_end = queue_channel_pair()
        thread, result = _serve_in_thread(worker_end, worker)

        coordinator.send(params_frame(init_params(MlpSpec(9, 3, (4,)), 0), 0))
        frame = coordinator.receive(timeout=30)
        assert frame.msg_type == MsgType.ERROR
        with pytest.raises(PeerError) as exc_info:
            check_error(frame)
        assert exc_info.value.code == "manifest"
        thread.join(timeout=30)
        assert result["code"] == 1

    def test_unexpected_frame(self, worker):
        coordinator, worker_end = queue_channel_pair()
        thread, result = _serve_in_thread(worker_end, worker)

        coordinator.send(Frame(MsgType.HELLO))
        frame = coordinator.receive(timeout=30)
        assert frame.msg_type == MsgType.ERROR
        thread.join(timeout=30)
        assert result["code"] == 1

    def test_lost_coordinator(self, worker):
        coordinator, worker_end = queue_channel_pair()
        thread, result = _serve_in_thread(worker_end, worker)
        coordinator.close()
        thread.join(timeout=30)
        assert result["code"] == 1

    @pytest.mark.parametrize(
        ("payload", "code"),
        [
            ({"round": 0, "version": 0, "params": "not-bytes"}, "payload"),
            ({"round": 0, "version": "x", "params": b""}, "payload"),
            ({"round": "0", "version": 0, "params": b""}, "payload"),
            ({"version": 0, "params": b""}, "payload"),
            ({"round": 0, "version": 0, "params": b"\x01"}, "truncated"),
        ],
    )
    def test_malformed_params_frame(self, worker, payload, code):
        """Test that a well-framed but mistyped Params payload gets an Error reply."""
        coordinator, worker_end = queue_channel_pair()
        thread, result = _serve_in_thread(worker_end, worker)

        coordinator.send(Frame(MsgType.PARAMS, msgpack.packb(payload)))
        frame = coordinator.receive(timeout=30)
        assert frame.msg_type == MsgType.ERROR
        with pytest.raises(PeerError) as exc_info:
            check_error(frame)
        assert exc_info.value.code == code
        assert exc_info.value.worker_id == 0
        thread.join(timeout=30)
        assert result["code"] == 1
