"""Point-reaching tasks on top of analytic forward kinematics."""

from dataclasses import dataclass, field
from functools import lru_cache
from itertools import product
from typing import Any, cast

import numpy as np
from numpy.typing import ArrayLike, NDArray

from armfleet.core.errors import ArmfleetError, ConfigError
from armfleet.core.kinematics import (
    KinematicChain,
    forward_kinematics,
    get_chain,
    is_reachable,
)

FloatArray = NDArray[np.float64]
Observation = NDArray[np.float64]

SEED_MASK = (1 << 64) - 1


class EnvError(ArmfleetError):
    """Invalid action or use of a finished episode."""


def seeded_generator(*entropy: int) -> np.random.Generator:
    """Counter-based generator keyed by the given integers."""
    words = [int(e) & SEED_MASK for e in entropy]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


@dataclass(frozen=True, eq=False)
class ReacherEnvSpec:
    """Reaching task: chain, target box, horizon and stop threshold."""

    chain: KinematicChain
    target_low: tuple[float, float, float]
    target_high: tuple[float, float, float]
    action_scale: tuple[float, ...]
    horizon: int = 2048
    reward_stop_threshold: float = -0.01
    check_reachable: bool = True

    def __post_init__(self) -> None:
        if self.horizon < 1:
            raise ConfigError(f"horizon must be >= 1 (got {self.horizon})")
        if self.reward_stop_threshold > 0:
            raise ConfigError(
                f"reward_stop_threshold must be <= 0 (got {self.reward_stop_threshold})"
            )
        if len(self.action_scale) != self.chain.dof:
            raise ConfigError(
                f"action_scale needs {self.chain.dof} entries, got {len(self.action_scale)}"
            )
        if any(s <= 0 for s in self.action_scale):
            raise ConfigError("action_scale entries must be positive")
        if any(lo >= hi for lo, hi in zip(self.target_low, self.target_high, strict=True)):
            raise ConfigError("target region must have low < high on every axis")
        if self.check_reachable:
            self._validate_target_region()

    @property
    def observation_dim(self) -> int:
        return self.chain.dof + 6

    @property
    def action_dim(self) -> int:
        return self.chain.dof

    def check_points(self, count: int = 16) -> FloatArray:
        """The 27 lattice points of the target box plus seeded interior points."""
        low = np.asarray(self.target_low)
        high = np.asarray(self.target_high)
        mid = 0.5 * (low + high)
        lattice = [
            [(low[i], mid[i], high[i])[c] for i, c in enumerate(combo)]
            for combo in product(range(3), repeat=3)
        ]
        interior = seeded_generator(0).uniform(low, high, size=(count, 3))
        return np.vstack([np.asarray(lattice), interior])

    def _validate_target_region(self) -> None:
        rng = seeded_generator(1)
        for point in self.check_points():
            if not is_reachable(self.chain, point, rng):
                raise ConfigError(
                    f"Target region of '{self.chain.name}' is not reachable at "
                    f"{np.round(point, 4).tolist()}"
                )

    def to_dict(self) -> dict[str, Any]:
        return {
            "chain": self.chain.to_dict(),
            "target_low": list(self.target_low),
            "target_high": list(self.target_high),
            "action_scale": list(self.action_scale),
            "horizon": self.horizon,
            "reward_stop_threshold": self.reward_stop_threshold,
        }

    @classmethod
    def from_dict(
        cls, data: dict[str, Any], check_reachable: bool = True
    ) -> "ReacherEnvSpec":
        try:
            low = [float(v) for v in data["target_low"]]
            high = [float(v) for v in data["target_high"]]
            return cls(
                chain=KinematicChain.from_dict(cast(dict[str, Any], data["chain"])),
                target_low=(low[0], low[1], low[2]),
                target_high=(high[0], high[1], high[2]),
                action_scale=tuple(float(v) for v in data["action_scale"]),
                horizon=int(data.get("horizon", 2048)),
                reward_stop_threshold=float(data.get("reward_stop_threshold", -0.01)),
                check_reachable=check_reachable,
            )
        except (KeyError, TypeError, ValueError, IndexError) as e:
            raise ConfigError(f"Invalid environment spec: {e}") from e


@dataclass(frozen=True, eq=False)
class EnvState:
    """Episode state; treated as an immutable value."""

    spec: ReacherEnvSpec
    joint_positions: FloatArray
    target: FloatArray
    steps_elapsed: int = 0
    rng_state: dict[str, Any] = field(default_factory=dict[str, Any])


@dataclass(frozen=True, eq=False)
class StepResult:
    """Outcome of one environment step, including the successor state."""

    observation: Observation
    reward: float
    done: bool
    distance: float
    state: EnvState


def make_observation(state: EnvState) -> Observation:
    """Normalised joints, end-effector position and target, length dof + 6."""
    chain = state.spec.chain
    span = chain.upper - chain.lower
    normalized = 2.0 * (state.joint_positions - chain.lower) / span - 1.0
    end_effector = forward_kinematics(chain, state.joint_positions)
    return np.concatenate([normalized, end_effector, state.target])


def env_reset(
    spec: ReacherEnvSpec, seed: int, joint_positions: ArrayLike | None = None
) -> tuple[EnvState, Observation]:
    """Start an episode at mid-range joints with a target drawn from ``seed``.

    ``joint_positions`` overrides the mid-range start (evaluation runs use
    perturbed starts); it is clamped to the joint limits.
    """
    rng = seeded_generator(seed)
    target = rng.uniform(spec.target_low, spec.target_high)
    if joint_positions is None:
        start = spec.chain.mid_range()
    else:
        start = spec.chain.clamp(joint_positions)

    state = EnvState(
        spec=spec,
        joint_positions=start,
        target=target,
        steps_elapsed=0,
        rng_state=dict(rng.bit_generator.state),
    )
    return state, make_observation(state)


def env_step(state: EnvState, action: ArrayLike) -> StepResult:
    """Apply a joint-delta action in [-1, 1]^dof and score the new pose.

    Raises:
        EnvError: On a wrong action length, a non-finite action or a step past
            the horizon.
    """
    spec = state.spec
    act = np.asarray(action, dtype=np.float64)
    if act.shape != (spec.action_dim,):
        raise EnvError(
            f"Action has shape {act.shape}, expected ({spec.action_dim},)", "dimension"
        )
    if not np.all(np.isfinite(act)):
        raise EnvError("Action contains non-finite values", "non_finite")
    if state.steps_elapsed >= spec.horizon:
        raise EnvError("Episode already reached its horizon; reset first", "done")

    delta = np.clip(act, -1.0, 1.0) * np.asarray(spec.action_scale)
    q_next = spec.chain.clamp(state.joint_positions + delta)
    successor = EnvState(
        spec=spec,
        joint_positions=q_next,
        target=state.target,
        steps_elapsed=state.steps_elapsed + 1,
        rng_state=state.rng_state,
    )

    observation = make_observation(successor)
    distance = float(np.linalg.norm(observation[-6:-3] - state.target))
    return StepResult(
        observation=observation,
        reward=-distance,
        done=successor.steps_elapsed >= spec.horizon,
        distance=distance,
        state=successor,
    )


def scara3_env(horizon: int = 2048) -> ReacherEnvSpec:
    # 0.30 x 0.30 box on the +x side of the annulus, z inside the lift travel
    return ReacherEnvSpec(
        chain=get_chain("scara3"),
        target_low=(0.21, -0.15, 0.025),
        target_high=(0.51, 0.15, 0.175),
        action_scale=(0.05, 0.05, 0.01),
        horizon=horizon,
    )


def arm6_env(horizon: int = 2048) -> ReacherEnvSpec:
    return ReacherEnvSpec(
        chain=get_chain("arm6"),
        target_low=(0.25, -0.15, 0.25),
        target_high=(0.55, 0.15, 0.55),
        action_scale=(0.05,) * 6,
        horizon=horizon,
    )


PRESET_ENVS = {"scara3": scara3_env, "arm6": arm6_env}


@lru_cache(maxsize=8)
def get_env_spec(name: str, horizon: int = 2048) -> ReacherEnvSpec:
    """Build (once) and validate a preset task."""
    if name not in PRESET_ENVS:
        raise ConfigError(
            f"Unknown environment '{name}'. Available: {', '.join(PRESET_ENVS)}"
        )
    return PRESET_ENVS[name](horizon)
