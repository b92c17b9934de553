"""Column-oriented storage for collected transitions."""

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from armfleet.core.errors import ArmfleetError

FloatArray = NDArray[np.float64]


class RolloutError(ArmfleetError):
    """Inconsistent rollout columns or episode boundaries."""


@dataclass(frozen=True, eq=False)
class RolloutBatch:
    """Transitions gathered by one worker, whole episodes only.

    ``episode_boundaries`` holds the exclusive end index of every episode, so
    the last entry equals ``total_steps`` and ``dones[end - 1]`` is set for
    each boundary.
    """

    observations: FloatArray
    actions: FloatArray
    log_probs: FloatArray
    rewards: FloatArray
    values: FloatArray
    dones: NDArray[np.bool_]
    episode_boundaries: tuple[int, ...]
    collection_seconds: float = 0.0

    def __post_init__(self) -> None:
        n = len(self.rewards)
        for name in ("observations", "actions", "log_probs", "values", "dones"):
            if len(getattr(self, name)) != n:
                raise RolloutError(
                    f"Column '{name}' has a different length than rewards", "columns"
                )
        bounds = np.asarray(self.episode_boundaries)
        if bounds.size and (np.any(np.diff(bounds) <= 0) or bounds[0] <= 0):
            raise RolloutError("Episode boundaries must be strictly increasing", "boundaries")
        if n and (not bounds.size or bounds[-1] != n):
            raise RolloutError(
                "Last episode boundary must equal the number of steps", "boundaries"
            )
        if not np.array_equal(np.flatnonzero(self.dones) + 1, bounds):
            raise RolloutError("Done flags do not match episode boundaries", "dones")

    @property
    def total_steps(self) -> int:
        return int(len(self.rewards))

    def episode_slices(self) -> list[slice]:
        starts = (0, *self.episode_boundaries[:-1])
        return [slice(s, e) for s, e in zip(starts, self.episode_boundaries, strict=True)]

    def episode_mean_rewards(self) -> FloatArray:
        """Mean per-step reward of every episode."""
        return np.array([float(np.mean(self.rewards[s])) for s in self.episode_slices()])

    def mean_episode_reward(self) -> float:
        means = self.episode_mean_rewards()
        return float(np.mean(means)) if means.size else float("nan")
