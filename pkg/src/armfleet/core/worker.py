"""Rollout worker: collects experience, updates a local model, serves rounds."""

import os
import time
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.typing import NDArray
from rich.console import Console

from armfleet.core.channel import ChannelClosedError, ChannelTimeoutError
from armfleet.core.errors import ArmfleetError, ConfigError
from armfleet.core.policy import (
    MlpSpec,
    ParamVector,
    init_params,
    policy_forward,
    sample_action,
)
from armfleet.core.ppo import (
    LossBreakdown,
    PpoConfig,
    adapt_kl_coeff,
    compute_advantages,
    sgd_update,
)
from armfleet.core.protocol import (
    MsgType,
    ProtocolError,
    ack_frame,
    check_error,
    error_frame,
    hello_frame,
    local_model_frame,
    parse_assign_config,
    parse_params,
)
from armfleet.core.reacher_env import (
    EnvError,
    ReacherEnvSpec,
    env_reset,
    env_step,
    seeded_generator,
)
from armfleet.core.rollout import RolloutBatch
from armfleet.types import AckPayload, Channel, ErrorPayload, HelloPayload, LocalModelStats

console = Console(stderr=True)

# Stream tags keep the rollout and SGD generators independent.
ROLLOUT_STREAM = 0x524F4C4C
SGD_STREAM = 0x53474400
HANDSHAKE_TIMEOUT = 60.0


class WorkerError(ArmfleetError):
    """Failure inside a worker, tagged with its id."""

    def __init__(self, worker_id: int, message: str, code: str | None = None):
        self.worker_id = worker_id
        super().__init__(f"Worker {worker_id}: {message}", code)


@dataclass
class WorkerState:
    """Everything one worker owns between rounds."""

    worker_id: int
    spec: ReacherEnvSpec
    cfg: PpoConfig
    params: ParamVector
    global_seed: int
    round: int = 0
    cumulative_steps: int = 0
    last_epochs: list[LossBreakdown] = field(default_factory=list[LossBreakdown])

    @classmethod
    def create(
        cls, worker_id: int, spec: ReacherEnvSpec, cfg: PpoConfig, global_seed: int
    ) -> "WorkerState":
        """Worker with placeholder parameters of the right manifest."""
        mlp = MlpSpec(spec.observation_dim, spec.action_dim, cfg.hidden_sizes)
        return cls(
            worker_id=worker_id,
            spec=spec,
            cfg=cfg,
            params=init_params(mlp, global_seed),
            global_seed=global_seed,
        )


def collect_rollouts(
    worker: WorkerState, min_steps: int, local_round: int = 0
) -> RolloutBatch:
    """Run whole stochastic episodes until at least ``min_steps`` were taken.

    Raises:
        WorkerError: If the environment rejects a step.
    """
    if min_steps < 1:
        raise ConfigError(f"min_steps must be >= 1 (got {min_steps})")
    rng = seeded_generator(
        worker.global_seed, worker.worker_id, worker.round, local_round, ROLLOUT_STREAM
    )
    spec = worker.spec
    params = worker.params

    observations: list[NDArray[np.float64]] = []
    actions: list[NDArray[np.float64]] = []
    log_probs: list[float] = []
    rewards: list[float] = []
    values: list[float] = []
    dones: list[bool] = []
    boundaries: list[int] = []

    started = time.perf_counter()
    while not boundaries or boundaries[-1] < min_steps:
        state, obs = env_reset(spec, int(rng.integers(0, 2**63)))
        done = False
        while not done:
            out = policy_forward(params, obs)
            action, log_prob = sample_action(out, rng)
            try:
                result = env_step(state, action)
            except EnvError as e:
                raise WorkerError(worker.worker_id, str(e), e.code) from e
            observations.append(obs)
            actions.append(action)
            log_probs.append(log_prob)
            rewards.append(result.reward)
            values.append(float(out.value))
            dones.append(result.done)
            state, obs, done = result.state, result.observation, result.done
        boundaries.append(len(rewards))

    return RolloutBatch(
        observations=np.asarray(observations),
        actions=np.asarray(actions),
        log_probs=np.asarray(log_probs),
        rewards=np.asarray(rewards),
        values=np.asarray(values),
        dones=np.asarray(dones, dtype=np.bool_),
        episode_boundaries=tuple(boundaries),
        collection_seconds=time.perf_counter() - started,
    )


def local_update(
    worker: WorkerState, batch: RolloutBatch, local_round: int = 0
) -> ParamVector:
    """Advantages, minibatch SGD and KL adaptation; the worker keeps the result.

    The SGD stream ignores the worker id, so identical inputs produce identical
    local models on every worker.
    """
    cfg = worker.cfg
    processed = compute_advantages(batch, cfg.gamma, cfg.gae_lambda)
    rng = seeded_generator(worker.global_seed, worker.round, local_round, SGD_STREAM)
    params, epochs = sgd_update(worker.params, processed, cfg, rng)
    worker.cfg = replace(
        cfg, kl_coeff=adapt_kl_coeff(cfg.kl_coeff, epochs[-1].mean_kl, cfg.kl_target)
    )
    worker.params = params
    worker.last_epochs = epochs
    return params


def run_round(worker: WorkerState) -> LocalModelStats:
    """``local_rounds`` collect/update cycles from the current parameters."""
    steps = 0
    episodes = 0
    reward_sum = 0.0
    collecting = 0.0
    updating = 0.0
    for local_round in range(worker.cfg.local_rounds):
        batch = collect_rollouts(worker, worker.cfg.rollout_target(), local_round)
        started = time.perf_counter()
        local_update(worker, batch, local_round)
        updating += time.perf_counter() - started
        collecting += batch.collection_seconds
        steps += batch.total_steps
        episodes += len(batch.episode_boundaries)
        reward_sum += batch.mean_episode_reward() * batch.total_steps

    worker.cumulative_steps += steps
    return LocalModelStats(
        worker_id=worker.worker_id,
        round=worker.round,
        total_steps=steps,
        cumulative_steps=worker.cumulative_steps,
        episodes=episodes,
        mean_episode_reward=reward_sum / steps,
        collection_seconds=collecting,
        update_seconds=updating,
        kl_coeff=worker.cfg.kl_coeff,
        final_kl=worker.last_epochs[-1].mean_kl,
    )


def _report_error(channel: Channel, worker_id: int | None, code: str, message: str) -> None:
    try:
        channel.send(error_frame(ErrorPayload(worker_id=worker_id, code=code, message=message)))
    except ChannelClosedError:
        pass


def worker_serve(channel: Channel, worker: WorkerState) -> int:
    """Answer Params frames until Shutdown.

    Returns:
        Process exit status: 0 after Shutdown, 1 on a protocol or run failure
    """
    while True:
        try:
            frame = channel.receive()
        except ChannelClosedError:
            console.print(f"[red]✗ Worker {worker.worker_id}: coordinator connection lost[/red]")
            return 1
        except ProtocolError as e:
            _report_error(channel, worker.worker_id, e.code or "protocol", str(e))
            return 1

        if frame.msg_type == MsgType.SHUTDOWN:
            return 0
        if frame.msg_type != MsgType.PARAMS:
            _report_error(
                channel,
                worker.worker_id,
                "unexpected",
                f"Unexpected {frame.msg_type.name} frame",
            )
            return 1

        try:
            params, round_index = parse_params(frame)
            if params.manifest != worker.params.manifest:
                raise ProtocolError("Received parameters with a foreign manifest", "manifest")
            worker.params = params
            worker.round = round_index
            channel.send(
                ack_frame(
                    AckPayload(
                        worker_id=worker.worker_id, round=round_index, digest=params.digest()
                    )
                )
            )
            stats = run_round(worker)
            channel.send(local_model_frame(worker.params, stats))
        except ChannelClosedError:
            console.print(f"[red]✗ Worker {worker.worker_id}: coordinator connection lost[/red]")
            return 1
        except ArmfleetError as e:
            _report_error(channel, worker.worker_id, e.code or "failed", str(e))
            return 1


def worker_handshake(
    channel: Channel,
    worker_id_hint: int | None,
    env_name: str,
    declared_cfg: PpoConfig | None = None,
    declared_seed: int | None = None,
) -> WorkerState:
    """Hello, AssignConfig, Ack; returns the configured worker.

    The coordinator's assignment is authoritative; a locally declared config
    or seed that disagrees with it only produces a warning.
    """
    channel.send(
        hello_frame(HelloPayload(worker_id_hint=worker_id_hint, pid=os.getpid(), env=env_name))
    )
    try:
        assign = parse_assign_config(check_error(channel.receive(timeout=HANDSHAKE_TIMEOUT)))
    except ChannelTimeoutError as e:
        hint = -1 if worker_id_hint is None else worker_id_hint
        raise WorkerError(hint, "no AssignConfig from coordinator", "handshake") from e
    spec = ReacherEnvSpec.from_dict(assign["env_spec"], check_reachable=False)
    cfg = PpoConfig.from_dict(assign["ppo_config"])
    if declared_cfg is not None and declared_cfg != cfg:
        console.print("[yellow]⚠ Coordinator assigned a different PPO config; using it[/yellow]")
    if declared_seed is not None and declared_seed != assign["global_seed"]:
        console.print(
            f"[yellow]⚠ Coordinator assigned seed {assign['global_seed']} "
            f"(declared {declared_seed})[/yellow]"
        )
    worker = WorkerState.create(assign["worker_id"], spec, cfg, assign["global_seed"])
    channel.send(
        ack_frame(AckPayload(worker_id=worker.worker_id, round=-1, digest=worker.params.digest()))
    )
    return worker


def run_worker_session(
    channel: Channel,
    worker_id_hint: int | None,
    env_name: str,
    declared_cfg: PpoConfig | None = None,
    declared_seed: int | None = None,
) -> int:
    """Full worker lifetime over an open channel; returns the exit status."""
    try:
        try:
            worker = worker_handshake(
                channel, worker_id_hint, env_name, declared_cfg, declared_seed
            )
        except ChannelClosedError:
            console.print("[red]✗ Coordinator closed the connection during handshake[/red]")
            return 1
        except ArmfleetError as e:
            _report_error(channel, worker_id_hint, e.code or "handshake", str(e))
            return 1
        return worker_serve(channel, worker)
    finally:
        channel.close()
