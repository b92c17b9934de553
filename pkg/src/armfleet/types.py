"""Type definitions for armfleet.

TypedDict shapes of the msgpack payloads exchanged between coordinator and
workers, result rows written by experiment runs, and the Protocol interfaces
that decouple the coordinator from concrete transports.
"""

from typing import TYPE_CHECKING, Any, Literal, NotRequired, Protocol, TypedDict

if TYPE_CHECKING:
    from armfleet.core.protocol import Frame

# =============================================================================
# Wire payloads
# =============================================================================


class HelloPayload(TypedDict):
    """First message of a worker after connecting."""

    worker_id_hint: int | None
    pid: int
    env: str


class AssignConfigPayload(TypedDict):
    """Coordinator reply to Hello: identity plus everything needed to train."""

    worker_id: int
    env_spec: dict[str, Any]
    ppo_config: dict[str, Any]
    global_seed: int


class AckPayload(TypedDict):
    worker_id: int
    round: int
    digest: str


class ErrorPayload(TypedDict):
    worker_id: int | None
    code: str
    message: str


class LocalModelStats(TypedDict):
    """Statistics piggybacked on every LocalModel reply."""

    worker_id: int
    round: int
    total_steps: int
    cumulative_steps: int
    episodes: int
    mean_episode_reward: float
    collection_seconds: float
    update_seconds: float
    kl_coeff: float
    final_kl: float


# =============================================================================
# Cluster and experiment records
# =============================================================================

WorkerExitStatus = Literal["clean", "forced", "absent"]


class WorkerExitRecord(TypedDict):
    worker_id: int
    status: WorkerExitStatus
    returncode: int | None


class SummaryRow(TypedDict):
    """One (workers, seed) cell of an experiment grid."""

    env: str
    workers: int
    seed: int
    status: Literal["ok", "failed"]
    reached: bool
    rounds: int
    timesteps: int
    wall_clock_s: float
    stop_reason: str
    time_to_threshold_s: NotRequired[float]
    rounds_to_threshold: NotRequired[int]
    timesteps_to_threshold: NotRequired[int]
    accuracy_mm: NotRequired[float]
    repeatability_mm: NotRequired[float]
    error: NotRequired[str]


# =============================================================================
# Protocol interfaces
# =============================================================================


class Channel(Protocol):
    """Bidirectional, ordered frame transport between coordinator and one worker."""

    def send(self, frame: "Frame") -> None:
        """Send one frame; raises ChannelClosedError if the peer is gone."""
        ...

    def receive(self, timeout: float | None = None) -> "Frame":
        """Block for the next frame; raises ChannelTimeoutError on timeout."""
        ...

    def close(self) -> None:
        ...


class RoundCallback(Protocol):
    """Progress hook invoked after every completed training round."""

    def __call__(self, round_index: int, mean_reward: float, timesteps: int) -> None:
        ...
