"""Global policy lifecycle: broadcast, synchronous gather, merge, stop rule."""

import csv
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
from numpy.typing import ArrayLike, NDArray

from armfleet.core.errors import ArmfleetError, ConfigError
from armfleet.core.policy import MlpSpec, ParamVector, init_params, policy_forward
from armfleet.core.ppo import PpoConfig
from armfleet.core.protocol import (
    check_error,
    parse_ack,
    parse_local_model,
    params_frame,
)
from armfleet.core.reacher_env import (
    ReacherEnvSpec,
    env_reset,
    env_step,
    seeded_generator,
)
from armfleet.types import AckPayload, Channel, LocalModelStats, RoundCallback

FloatArray = NDArray[np.float64]

METRICS_HEADER = ("round", "timesteps", "wall_clock_s", "mean_reward", "workers", "seed")
EVAL_STREAM = 0x4556414C
StopReason = Literal["threshold", "max_rounds", "max_wall_clock"]


class RoundAbortedError(ArmfleetError):
    """A worker failed or stayed silent during a round."""

    def __init__(self, worker_id: int, message: str, code: str | None = None):
        self.worker_id = worker_id
        super().__init__(f"Round aborted by worker {worker_id}: {message}", code)


class ManifestMismatchError(ArmfleetError):
    def __init__(self, worker_id: int):
        self.worker_id = worker_id
        super().__init__(
            f"Model from worker {worker_id} has a different parameter manifest", "manifest"
        )


# Merging


def _tree_sum(rows: FloatArray) -> FloatArray:
    """Pairwise sum over axis 0 in index order."""
    parts = list(rows)
    while len(parts) > 1:
        paired = [parts[i] + parts[i + 1] for i in range(0, len(parts) - 1, 2)]
        if len(parts) % 2:
            paired.append(parts[-1])
        parts = paired
    return parts[0]


def merge_models(
    models: list[ParamVector],
    worker_ids: list[int] | None = None,
    weights: list[float] | None = None,
) -> ParamVector:
    """Element-wise mean of the local models.

    Each coordinate is sorted before a pairwise reduction so the result does
    not depend on arrival order, and it is formed as min + mean(delta) so
    identical inputs come back unchanged.

    Raises:
        ManifestMismatchError: Naming the first worker whose manifest differs.
    """
    if not models:
        raise ArmfleetError("Cannot merge an empty list of models", "empty")
    ids = worker_ids if worker_ids is not None else list(range(len(models)))
    reference = models[0].manifest
    for worker_id, model in zip(ids, models, strict=True):
        if model.manifest != reference:
            raise ManifestMismatchError(worker_id)

    stacked = np.stack([m.values for m in models])
    version = max(m.version for m in models) + 1
    if weights is None:
        ordered = np.sort(stacked, axis=0)
        base = ordered[0]
        mean = base + _tree_sum(ordered - base) / len(models)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (len(models),) or np.any(w < 0) or not np.any(w > 0):
            raise ArmfleetError("Merge weights must be non-negative with a positive sum")
        order = np.argsort(stacked, axis=0, kind="stable")
        ordered = np.take_along_axis(stacked, order, axis=0)
        ordered_w = w[order]
        base = ordered[0]
        total = _tree_sum(np.sort(w)[:, None])[0]
        mean = base + _tree_sum(ordered_w * (ordered - base)) / total
    return ParamVector(values=mean, manifest=reference, version=version)


# Round messaging


def broadcast(
    params: ParamVector,
    channels: dict[int, Channel],
    round_index: int,
    timeout: float | None = 60.0,
) -> dict[int, AckPayload]:
    """Send ``params`` to every worker and wait for digest acknowledgements.

    Raises:
        RoundAbortedError: If a worker fails, times out or acks another digest.
    """
    frame = params_frame(params, round_index)
    digest = params.digest()
    for worker_id in sorted(channels):
        try:
            channels[worker_id].send(frame)
        except ArmfleetError as e:
            raise RoundAbortedError(worker_id, str(e), "send") from e

    deadline = None if timeout is None else time.monotonic() + timeout
    acks: dict[int, AckPayload] = {}
    for worker_id in sorted(channels):
        remaining = None if deadline is None else max(deadline - time.monotonic(), 1e-3)
        try:
            ack = parse_ack(check_error(channels[worker_id].receive(timeout=remaining)))
        except ArmfleetError as e:
            raise RoundAbortedError(worker_id, f"no acknowledgement ({e})", "ack") from e
        if ack["digest"] != digest or ack["round"] != round_index:
            raise RoundAbortedError(worker_id, "acknowledged different parameters", "digest")
        acks[worker_id] = ack
    return acks


def gather(
    channels: dict[int, Channel], round_index: int, timeout: float | None = None
) -> dict[int, tuple[ParamVector, LocalModelStats]]:
    """Receive one LocalModel from every worker concurrently."""

    def receive(worker_id: int) -> tuple[ParamVector, LocalModelStats]:
        frame = channels[worker_id].receive(timeout=timeout)
        return parse_local_model(check_error(frame))

    ids = sorted(channels)
    results: dict[int, tuple[ParamVector, LocalModelStats]] = {}
    # blocked receivers are released once the cluster closes their channels
    executor = ThreadPoolExecutor(max_workers=len(ids), thread_name_prefix="gather")
    try:
        futures = {worker_id: executor.submit(receive, worker_id) for worker_id in ids}
        for worker_id in ids:
            try:
                params, stats = futures[worker_id].result()
            except ArmfleetError as e:
                raise RoundAbortedError(worker_id, str(e), "gather") from e
            if stats["round"] != round_index:
                raise RoundAbortedError(
                    worker_id, f"answered for round {stats['round']}", "round"
                )
            results[worker_id] = (params, stats)
    finally:
        executor.shutdown(wait=False, cancel_futures=True)
    return results


# Metrics and stopping


@dataclass(frozen=True)
class MetricsRow:
    round: int
    timesteps: int
    wall_clock_s: float
    mean_reward: float
    workers: int
    seed: int

    def as_csv(self) -> list[str]:
        return [
            str(self.round),
            str(self.timesteps),
            repr(float(self.wall_clock_s)),
            repr(float(self.mean_reward)),
            str(self.workers),
            str(self.seed),
        ]


@dataclass
class TrainingMetrics:
    """One row per completed round, strictly ordered in round and time."""

    rows: list[MetricsRow] = field(default_factory=list[MetricsRow])

    def append(self, row: MetricsRow) -> None:
        if self.rows:
            last = self.rows[-1]
            if row.round <= last.round or row.wall_clock_s <= last.wall_clock_s:
                raise ArmfleetError("Metrics rows must increase in round and wall clock")
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    def write_csv(self, path: str | Path) -> Path:
        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        with target.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(METRICS_HEADER)
            writer.writerows(row.as_csv() for row in self.rows)
        return target

    @classmethod
    def read_csv(cls, path: str | Path) -> "TrainingMetrics":
        with Path(path).open(newline="", encoding="utf-8") as handle:
            reader = csv.reader(handle)
            header = tuple(next(reader, ()))
            if header != METRICS_HEADER:
                raise ConfigError(f"{path} does not have the metrics header")
            metrics = cls()
            for record in reader:
                metrics.append(
                    MetricsRow(
                        round=int(record[0]),
                        timesteps=int(record[1]),
                        wall_clock_s=float(record[2]),
                        mean_reward=float(record[3]),
                        workers=int(record[4]),
                        seed=int(record[5]),
                    )
                )
        return metrics


@dataclass(frozen=True)
class StopCriterion:
    reward_threshold: float = -0.01
    max_rounds: int | None = 300
    max_wall_clock_seconds: float = math.inf

    def __post_init__(self) -> None:
        if self.max_rounds is not None and self.max_rounds < 0:
            raise ConfigError(f"max_rounds must be >= 0 (got {self.max_rounds})")
        if self.max_rounds is None and not math.isfinite(self.max_wall_clock_seconds):
            raise ConfigError("StopCriterion needs a finite round or wall-clock bound")


class TrainingAbortedError(ArmfleetError):
    """A round failed; ``metrics`` holds every completed round."""

    def __init__(self, message: str, metrics: TrainingMetrics):
        self.metrics = metrics
        super().__init__(message, "aborted")


@dataclass
class GlobalPolicy:
    params: ParamVector
    round: int = 0
    cumulative_timesteps: int = 0
    started_at: float = field(default_factory=time.perf_counter)

    def elapsed(self) -> float:
        return time.perf_counter() - self.started_at


@dataclass(frozen=True, eq=False)
class TrainingResult:
    params: ParamVector
    metrics: TrainingMetrics
    stop_reason: StopReason


def initial_policy(env_spec: ReacherEnvSpec, cfg: PpoConfig, seed: int) -> ParamVector:
    return init_params(
        MlpSpec(env_spec.observation_dim, env_spec.action_dim, cfg.hidden_sizes), seed
    )


def train(
    channels: dict[int, Channel],
    cfg: PpoConfig,
    stop: StopCriterion,
    seed: int,
    env_spec: ReacherEnvSpec,
    *,
    metrics_path: str | Path | None = None,
    on_round: RoundCallback | None = None,
    round_timeout: float | None = None,
) -> TrainingResult:
    """Synchronous broadcast/gather/merge rounds until a stop bound trips.

    Raises:
        ConfigError: If the worker count differs from ``cfg.num_workers``.
        TrainingAbortedError: If a round fails; partial metrics are written to
            ``metrics_path`` first.
    """
    if len(channels) != cfg.num_workers:
        raise ConfigError(
            f"Cluster has {len(channels)} workers but num_workers is {cfg.num_workers}"
        )
    policy = GlobalPolicy(params=initial_policy(env_spec, cfg, seed))
    metrics = TrainingMetrics()

    def persist() -> None:
        if metrics_path is not None:
            metrics.write_csv(metrics_path)

    if stop.max_rounds == 0:
        persist()
        return TrainingResult(policy.params, metrics, "max_rounds")

    while True:
        try:
            broadcast(policy.params, channels, policy.round)
            results = gather(channels, policy.round, round_timeout)
        except ArmfleetError as e:
            persist()
            raise TrainingAbortedError(
                f"Training aborted in round {policy.round + 1}: {e}", metrics
            ) from e

        ids = sorted(results)
        steps = [results[i][1]["total_steps"] for i in ids]
        weights = [float(s) for s in steps] if cfg.merge_weighting == "steps" else None
        policy.params = merge_models([results[i][0] for i in ids], ids, weights)
        policy.round += 1
        round_steps = sum(steps)
        policy.cumulative_timesteps += round_steps
        mean_reward = (
            sum(results[i][1]["mean_episode_reward"] * s for i, s in zip(ids, steps, strict=True))
            / round_steps
        )

        wall = policy.elapsed()
        if metrics.rows and wall <= metrics.rows[-1].wall_clock_s:
            wall = math.nextafter(metrics.rows[-1].wall_clock_s, math.inf)
        metrics.append(
            MetricsRow(
                round=policy.round,
                timesteps=policy.cumulative_timesteps,
                wall_clock_s=wall,
                mean_reward=mean_reward,
                workers=len(channels),
                seed=seed,
            )
        )
        if on_round is not None:
            on_round(policy.round, mean_reward, policy.cumulative_timesteps)

        reason: StopReason | None = None
        if mean_reward >= stop.reward_threshold:
            reason = "threshold"
        elif stop.max_rounds is not None and policy.round >= stop.max_rounds:
            reason = "max_rounds"
        elif wall >= stop.max_wall_clock_seconds:
            reason = "max_wall_clock"
        if reason is not None:
            persist()
            return TrainingResult(policy.params, metrics, reason)


# Evaluation


@dataclass(frozen=True, eq=False)
class AccuracyReport:
    """RMS end-effector errors in millimetres over repeated runs."""

    accuracy_mm: float
    repeatability_mm: float
    targets: FloatArray
    final_positions: FloatArray

    @property
    def n_runs(self) -> int:
        return len(self.final_positions)


def accuracy_repeatability(targets: ArrayLike, finals: ArrayLike) -> AccuracyReport:
    """Accuracy against the targets, repeatability against the mean final point.

    Inputs are in metres. The mean final point is taken as first + mean(delta)
    so coincident final positions give exactly zero repeatability.
    """
    t = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    f = np.atleast_2d(np.asarray(finals, dtype=np.float64))
    if f.shape[0] < 2:
        raise ConfigError("Repeatability needs at least 2 runs")
    if t.shape != f.shape:
        raise ConfigError(f"Targets {t.shape} and final positions {f.shape} differ in shape")
    accuracy = math.sqrt(float(np.mean(np.sum((t - f) ** 2, axis=1))))
    centre = f[0] + np.mean(f - f[0], axis=0)
    repeatability = math.sqrt(float(np.mean(np.sum((f - centre) ** 2, axis=1))))
    return AccuracyReport(
        accuracy_mm=accuracy * 1000.0,
        repeatability_mm=repeatability * 1000.0,
        targets=t,
        final_positions=f,
    )


def evaluate_policy(
    params: ParamVector,
    env_spec: ReacherEnvSpec,
    n_runs: int = 10,
    seed: int = 0,
    start_noise: float = 0.05,
    steps: int | None = None,
) -> AccuracyReport:
    """Roll out the policy mean ``n_runs`` times toward one common target.

    Each run starts from mid-range joints perturbed by up to ``start_noise``
    of the joint span, drawn from the seeded stream.
    """
    if n_runs < 2:
        raise ConfigError(f"n_runs must be >= 2 for repeatability (got {n_runs})")
    horizon = env_spec.horizon if steps is None else min(steps, env_spec.horizon)
    chain = env_spec.chain
    rng = seeded_generator(seed, EVAL_STREAM)
    target_seed = int(rng.integers(0, 2**63))

    targets: list[FloatArray] = []
    finals: list[FloatArray] = []
    for _ in range(n_runs):
        offset = rng.uniform(-start_noise, start_noise, chain.dof) * (chain.upper - chain.lower)
        state, obs = env_reset(env_spec, target_seed, joint_positions=chain.mid_range() + offset)
        for _ in range(horizon):
            action = policy_forward(params, obs).mean
            result = env_step(state, action)
            state, obs = result.state, result.observation
        targets.append(state.target)
        finals.append(obs[-6:-3])
    return accuracy_repeatability(np.asarray(targets), np.asarray(finals))
