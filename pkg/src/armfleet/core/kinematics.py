"""Forward kinematics for serial revolute/prismatic chains.

Chains are composed in order: for every joint the frame is first translated by
the joint's origin offset (expressed in the parent frame) and then moved by the
joint variable, a rotation about the joint axis for revolute joints or a
translation along it for prismatic joints. The end effector sits at the tool
offset of the last frame. The base frame is the identity.
"""

from dataclasses import dataclass, field
from typing import Any, Literal, cast

import numpy as np
import yaml
from numpy.typing import ArrayLike, NDArray

from armfleet.core.errors import ArmfleetError, ConfigError

JointKind = Literal["revolute", "prismatic"]
FloatArray = NDArray[np.float64]

AXIS_TOLERANCE = 1e-12


class KinematicsError(ArmfleetError):
    """Invalid joint configuration for a chain."""


@dataclass(frozen=True)
class Joint:
    """A single joint descriptor."""

    kind: JointKind
    axis: tuple[float, float, float]
    origin_offset: tuple[float, float, float]
    limit_lo: float
    limit_hi: float

    def __post_init__(self) -> None:
        if self.kind not in ("revolute", "prismatic"):
            raise ConfigError(f"Unknown joint kind: {self.kind!r}")
        norm = float(np.linalg.norm(self.axis))
        if abs(norm - 1.0) > AXIS_TOLERANCE:
            raise ConfigError(f"Joint axis {self.axis} must have unit norm (got {norm})")
        if not self.limit_lo < self.limit_hi:
            raise ConfigError(
                f"Joint limits must satisfy lo < hi (got {self.limit_lo}, {self.limit_hi})"
            )

    @property
    def extent(self) -> float:
        """Largest distance this joint and its incoming link can add."""
        link = float(np.linalg.norm(self.origin_offset))
        if self.kind == "prismatic":
            link += max(abs(self.limit_lo), abs(self.limit_hi))
        return link


@dataclass(frozen=True, eq=False)
class KinematicChain:
    """Ordered serial chain anchored at an identity base frame."""

    joints: tuple[Joint, ...]
    tool_offset: tuple[float, float, float] = (0.0, 0.0, 0.0)
    name: str = "custom"

    offsets: FloatArray = field(init=False, repr=False)
    axes: FloatArray = field(init=False, repr=False)
    revolute: NDArray[np.bool_] = field(init=False, repr=False)
    skew: FloatArray = field(init=False, repr=False)
    skew_sq: FloatArray = field(init=False, repr=False)
    tool: FloatArray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if not self.joints:
            raise ConfigError("A kinematic chain needs at least one joint")

        offsets = np.array([j.origin_offset for j in self.joints], dtype=np.float64)
        axes = np.array([j.axis for j in self.joints], dtype=np.float64)
        k = np.zeros((len(self.joints), 3, 3))
        k[:, 0, 1], k[:, 0, 2] = -axes[:, 2], axes[:, 1]
        k[:, 1, 0], k[:, 1, 2] = axes[:, 2], -axes[:, 0]
        k[:, 2, 0], k[:, 2, 1] = -axes[:, 1], axes[:, 0]

        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "axes", axes)
        object.__setattr__(
            self, "revolute", np.array([j.kind == "revolute" for j in self.joints])
        )
        object.__setattr__(self, "skew", k)
        object.__setattr__(self, "skew_sq", k @ k)
        object.__setattr__(self, "tool", np.asarray(self.tool_offset, dtype=np.float64))

    @property
    def dof(self) -> int:
        return len(self.joints)

    @property
    def lower(self) -> FloatArray:
        return np.array([j.limit_lo for j in self.joints], dtype=np.float64)

    @property
    def upper(self) -> FloatArray:
        return np.array([j.limit_hi for j in self.joints], dtype=np.float64)

    def mid_range(self) -> FloatArray:
        """Configuration halfway between the joint limits."""
        return 0.5 * (self.lower + self.upper)

    def clamp(self, q: ArrayLike) -> FloatArray:
        return np.clip(np.asarray(q, dtype=np.float64), self.lower, self.upper)

    def reach(self) -> float:
        """Upper bound on the distance from the base to the end effector."""
        return sum(j.extent for j in self.joints) + float(np.linalg.norm(self.tool))

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "joints": [
                {
                    "kind": j.kind,
                    "axis": list(j.axis),
                    "origin_offset": list(j.origin_offset),
                    "limits": [j.limit_lo, j.limit_hi],
                }
                for j in self.joints
            ],
            "tool_offset": list(self.tool_offset),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "KinematicChain":
        raw_joints = data.get("joints")
        if not isinstance(raw_joints, list) or not raw_joints:
            raise ConfigError("Chain definition needs a non-empty 'joints' list")

        joints: list[Joint] = []
        for index, raw in enumerate(cast(list[Any], raw_joints)):
            if not isinstance(raw, dict):
                raise ConfigError(f"Joint {index} must be a mapping")
            entry = cast(dict[str, Any], raw)
            try:
                lo, hi = entry["limits"]
                joints.append(
                    Joint(
                        kind=entry["kind"],
                        axis=_vector3(entry["axis"]),
                        origin_offset=_vector3(entry.get("origin_offset", [0, 0, 0])),
                        limit_lo=float(lo),
                        limit_hi=float(hi),
                    )
                )
            except (KeyError, TypeError, ValueError) as e:
                raise ConfigError(f"Invalid joint {index}: {e}") from e

        return cls(
            joints=tuple(joints),
            tool_offset=_vector3(data.get("tool_offset", [0, 0, 0])),
            name=str(data.get("name", "custom")),
        )


def _vector3(value: Any) -> tuple[float, float, float]:
    items = [float(v) for v in value]
    if len(items) != 3:
        raise ConfigError(f"Expected a 3-vector, got {value!r}")
    return items[0], items[1], items[2]


def _check_configuration(chain: KinematicChain, q: ArrayLike) -> FloatArray:
    q_arr = np.asarray(q, dtype=np.float64)
    if q_arr.shape != (chain.dof,):
        raise KinematicsError(
            f"Configuration has shape {q_arr.shape}, chain has {chain.dof} joints",
            "dimension",
        )
    if not np.all(np.isfinite(q_arr)):
        raise KinematicsError("Configuration contains non-finite values", "non_finite")
    outside = np.flatnonzero((q_arr < chain.lower) | (q_arr > chain.upper))
    if outside.size:
        i = int(outside[0])
        raise KinematicsError(
            f"Joint {i} value {q_arr[i]} outside limits "
            f"[{chain.joints[i].limit_lo}, {chain.joints[i].limit_hi}]",
            "limits",
        )
    return q_arr


def _axis_rotation(chain: KinematicChain, index: int, angle: float) -> FloatArray:
    # Rodrigues: R = I + sin(a) K + (1 - cos(a)) K^2
    return (
        np.eye(3)
        + np.sin(angle) * chain.skew[index]
        + (1.0 - np.cos(angle)) * chain.skew_sq[index]
    )


def _walk(
    chain: KinematicChain, q: FloatArray
) -> tuple[FloatArray, FloatArray, FloatArray]:
    """Return end effector, joint origins and world joint axes for ``q``."""
    rotation = np.eye(3)
    position = np.zeros(3)
    origins = np.empty((chain.dof, 3))
    axes = np.empty((chain.dof, 3))

    for i in range(chain.dof):
        position = position + rotation @ chain.offsets[i]
        origins[i] = position
        axes[i] = rotation @ chain.axes[i]
        if chain.revolute[i]:
            rotation = rotation @ _axis_rotation(chain, i, float(q[i]))
        else:
            position = position + axes[i] * q[i]

    end_effector = position + rotation @ chain.tool
    return end_effector, origins, axes


def forward_kinematics(chain: KinematicChain, q: ArrayLike) -> FloatArray:
    """End-effector position in metres for joint configuration ``q``.

    Raises:
        KinematicsError: On a dimension mismatch or a value outside the limits.
    """
    end_effector, _, _ = _walk(chain, _check_configuration(chain, q))
    return end_effector


def forward_kinematics_batch(chain: KinematicChain, configurations: ArrayLike) -> FloatArray:
    """Vectorised forward kinematics for an (N, dof) array of configurations."""
    qs = np.asarray(configurations, dtype=np.float64)
    if qs.ndim != 2 or qs.shape[1] != chain.dof:
        raise KinematicsError(
            f"Expected configurations of shape (N, {chain.dof}), got {qs.shape}",
            "dimension",
        )
    if np.any(qs < chain.lower) or np.any(qs > chain.upper):
        raise KinematicsError("Configuration outside joint limits", "limits")

    n = qs.shape[0]
    rotation = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
    position = np.zeros((n, 3))

    for i in range(chain.dof):
        position += rotation @ chain.offsets[i]
        if chain.revolute[i]:
            s = np.sin(qs[:, i])[:, None, None]
            c = np.cos(qs[:, i])[:, None, None]
            step = np.eye(3) + s * chain.skew[i] + (1.0 - c) * chain.skew_sq[i]
            rotation = rotation @ step
        else:
            position += (rotation @ chain.axes[i]) * qs[:, i : i + 1]

    return position + rotation @ chain.tool


def _pose_and_jacobian(chain: KinematicChain, q: FloatArray) -> tuple[FloatArray, FloatArray]:
    end_effector, origins, axes = _walk(chain, q)
    columns = np.where(
        chain.revolute[:, None],
        np.cross(axes, end_effector - origins),
        axes,
    )
    return end_effector, columns.T


def jacobian(chain: KinematicChain, q: ArrayLike) -> FloatArray:
    """Geometric position Jacobian (3 x dof) at ``q``."""
    return _pose_and_jacobian(chain, _check_configuration(chain, q))[1]


def solve_ik(
    chain: KinematicChain,
    target: ArrayLike,
    q0: ArrayLike,
    max_iter: int = 200,
    tolerance: float = 1e-4,
    damping: float = 1e-2,
    max_step: float = 0.2,
) -> tuple[FloatArray, float]:
    """Damped least-squares inverse kinematics with joint-limit clamping.

    Returns:
        Tuple of (final configuration, remaining distance to target in metres)
    """
    goal = np.asarray(target, dtype=np.float64)
    q = chain.clamp(q0)
    distance = float("inf")

    for _ in range(max_iter):
        end_effector, jac = _pose_and_jacobian(chain, q)
        error = goal - end_effector
        distance = float(np.linalg.norm(error))
        if distance < tolerance:
            break
        dq = jac.T @ np.linalg.solve(jac @ jac.T + damping**2 * np.eye(3), error)
        largest = float(np.max(np.abs(dq)))
        if largest > max_step:
            dq *= max_step / largest
        q = chain.clamp(q + dq)

    return q, float(np.linalg.norm(goal - _walk(chain, q)[0]))


def is_reachable(
    chain: KinematicChain,
    point: ArrayLike,
    rng: np.random.Generator,
    restarts: int = 12,
    tolerance: float = 5e-3,
) -> bool:
    """Whether IK reaches ``point`` from mid-range or a seeded restart."""
    starts = [chain.mid_range()]
    starts += [rng.uniform(chain.lower, chain.upper) for _ in range(restarts)]
    for start in starts:
        _, distance = solve_ik(chain, point, start, tolerance=tolerance / 10)
        if distance <= tolerance:
            return True
    return False


def chain_from_yaml(text: str) -> KinematicChain:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"Invalid chain YAML: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError("Chain file must contain a mapping")
    return KinematicChain.from_dict(cast(dict[str, Any], data))


def chain_to_yaml(chain: KinematicChain) -> str:
    return yaml.safe_dump(chain.to_dict(), sort_keys=False)


def scara3_chain() -> KinematicChain:
    """SCARA: two vertical revolute joints (0.30 m, 0.25 m links) and a 0.20 m lift."""
    z = (0.0, 0.0, 1.0)
    return KinematicChain(
        joints=(
            Joint("revolute", z, (0.0, 0.0, 0.0), -np.pi, np.pi),
            Joint("revolute", z, (0.30, 0.0, 0.0), -2.6, 2.6),
            Joint("prismatic", z, (0.25, 0.0, 0.0), 0.0, 0.20),
        ),
        name="scara3",
    )


def arm6_chain() -> KinematicChain:
    """Articulated arm with alternating z/y revolute joints, links summing to 1 m."""
    links = [0.20, 0.20, 0.20, 0.15, 0.15, 0.10]
    offsets = [0.0, *links[:-1]]
    joints: list[Joint] = []
    for i, offset in enumerate(offsets):
        if i % 2 == 0:
            joints.append(Joint("revolute", (0.0, 0.0, 1.0), (0.0, 0.0, offset), -np.pi, np.pi))
        else:
            joints.append(Joint("revolute", (0.0, 1.0, 0.0), (0.0, 0.0, offset), -2.0, 2.0))
    return KinematicChain(
        joints=tuple(joints), tool_offset=(0.0, 0.0, links[-1]), name="arm6"
    )


PRESET_CHAINS = {"scara3": scara3_chain, "arm6": arm6_chain}


def get_chain(name: str) -> KinematicChain:
    """Build a preset chain by name."""
    if name not in PRESET_CHAINS:
        raise ConfigError(
            f"Unknown chain preset '{name}'. Available: {', '.join(PRESET_CHAINS)}"
        )
    return PRESET_CHAINS[name]()
