"""Gaussian MLP policy with a value head and hand-written backpropagation.

Network layout: a tanh trunk of dense layers shared by two linear heads (action
mean and state value) plus a free, state-independent ``log_std`` vector. All
parameters live in one flat float64 ``ParamVector`` whose manifest names the
tensors, so the architecture can always be recovered from the vector itself.
"""

import hashlib
import math
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
from numpy.typing import ArrayLike, NDArray

from armfleet.core.errors import ArmfleetError, ConfigError
from armfleet.core.reacher_env import seeded_generator

FloatArray = NDArray[np.float64]
Manifest = tuple[tuple[str, tuple[int, ...]], ...]

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
LOG_2PI = math.log(2.0 * math.pi)


class PolicyError(ArmfleetError):
    """Shape or value problem in policy evaluation."""


class NonFiniteLossError(PolicyError):
    """A loss term evaluated to NaN or infinity."""

    def __init__(self, term: str):
        self.term = term
        super().__init__(f"Loss term '{term}' is not finite", "non_finite_loss")


@dataclass(frozen=True)
class MlpSpec:
    """Network dimensions."""

    input_dim: int
    action_dim: int
    hidden_sizes: tuple[int, ...] = (64, 64)

    def __post_init__(self) -> None:
        dims = (self.input_dim, self.action_dim, *self.hidden_sizes)
        if not self.hidden_sizes or any(d < 1 for d in dims):
            raise ConfigError(f"All network dimensions must be >= 1 (got {dims})")

    def manifest(self) -> Manifest:
        entries: list[tuple[str, tuple[int, ...]]] = []
        fan_in = self.input_dim
        for i, width in enumerate(self.hidden_sizes):
            entries.append((f"hidden.{i}.weight", (fan_in, width)))
            entries.append((f"hidden.{i}.bias", (width,)))
            fan_in = width
        entries += [
            ("mean.weight", (fan_in, self.action_dim)),
            ("mean.bias", (self.action_dim,)),
            ("value.weight", (fan_in, 1)),
            ("value.bias", (1,)),
            ("log_std", (self.action_dim,)),
        ]
        return tuple(entries)

    @property
    def param_count(self) -> int:
        return manifest_size(self.manifest())


def manifest_size(manifest: Manifest) -> int:
    return sum(math.prod(shape) for _, shape in manifest)


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Flat, read-only float64 parameters with a shape manifest."""

    values: FloatArray
    manifest: Manifest
    version: int = 0

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.float64, copy=True).reshape(-1)
        expected = manifest_size(self.manifest)
        if values.size != expected:
            raise PolicyError(
                f"Parameter vector has {values.size} values, manifest needs {expected}",
                "manifest",
            )
        if not np.all(np.isfinite(values)):
            raise PolicyError("Parameter vector contains non-finite values", "non_finite")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def size(self) -> int:
        return int(self.values.size)

    def tensors(self) -> dict[str, FloatArray]:
        """Read-only views of every named tensor."""
        views: dict[str, FloatArray] = {}
        offset = 0
        for name, shape in self.manifest:
            count = math.prod(shape)
            views[name] = self.values[offset : offset + count].reshape(shape)
            offset += count
        return views

    def with_values(self, values: ArrayLike, version: int | None = None) -> "ParamVector":
        return ParamVector(
            values=np.asarray(values, dtype=np.float64),
            manifest=self.manifest,
            version=self.version if version is None else version,
        )

    def digest(self) -> str:
        """SHA-256 over manifest and value bytes (version excluded)."""
        h = hashlib.sha256()
        for name, shape in self.manifest:
            h.update(f"{name}:{','.join(map(str, shape))};".encode())
        h.update(self.values.astype("<f8").tobytes())
        return h.hexdigest()


def params_from_tensors(
    manifest: Manifest, tensors: dict[str, FloatArray], version: int = 0
) -> ParamVector:
    flat = np.concatenate([np.asarray(tensors[name]).reshape(-1) for name, _ in manifest])
    return ParamVector(values=flat, manifest=manifest, version=version)


def init_params(spec: MlpSpec, seed: int) -> ParamVector:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases and log_std."""
    rng = seeded_generator(seed)
    tensors: dict[str, FloatArray] = {}
    for name, shape in spec.manifest():
        if name.endswith(".weight"):
            bound = 1.0 / math.sqrt(shape[0])
            tensors[name] = rng.uniform(-bound, bound, size=shape)
        else:
            tensors[name] = np.zeros(shape)
    return params_from_tensors(spec.manifest(), tensors)


@dataclass(frozen=True, eq=False)
class GaussianPolicyOutput:
    """Diagonal Gaussian over actions plus the state-value estimate.

    For a single observation ``mean``/``log_std`` have shape (A,) and ``value``
    is a 0-d array; for a batch of N they have shape (N, A) and (N,).
    """

    mean: FloatArray
    log_std: FloatArray
    value: FloatArray


@dataclass(frozen=True, eq=False)
class _Network:
    hidden: list[tuple[FloatArray, FloatArray]]
    mean: tuple[FloatArray, FloatArray]
    value: tuple[FloatArray, FloatArray]
    log_std: FloatArray


def _unpack(params: ParamVector) -> _Network:
    t = params.tensors()
    hidden: list[tuple[FloatArray, FloatArray]] = []
    while f"hidden.{len(hidden)}.weight" in t:
        i = len(hidden)
        hidden.append((t[f"hidden.{i}.weight"], t[f"hidden.{i}.bias"]))
    try:
        return _Network(
            hidden=hidden,
            mean=(t["mean.weight"], t["mean.bias"]),
            value=(t["value.weight"], t["value.bias"]),
            log_std=t["log_std"],
        )
    except KeyError as e:
        raise PolicyError(f"Manifest is missing tensor {e}", "manifest") from e


def _forward(
    net: _Network, obs: FloatArray
) -> tuple[GaussianPolicyOutput, list[FloatArray]]:
    if not net.hidden:
        raise PolicyError("Network has no hidden layers", "manifest")
    expected = net.hidden[0][0].shape[0]
    if obs.ndim != 2 or obs.shape[1] != expected:
        raise PolicyError(
            f"Observation has shape {obs.shape}, network expects {expected} inputs",
            "dimension",
        )

    activations = [obs]
    h = obs
    for weight, bias in net.hidden:
        h = np.tanh(h @ weight + bias)
        activations.append(h)

    mean = h @ net.mean[0] + net.mean[1]
    value = (h @ net.value[0] + net.value[1])[:, 0]
    log_std = np.broadcast_to(
        np.clip(net.log_std, LOG_STD_MIN, LOG_STD_MAX), mean.shape
    ).copy()
    return GaussianPolicyOutput(mean=mean, log_std=log_std, value=value), activations


def policy_forward(params: ParamVector, obs: ArrayLike) -> GaussianPolicyOutput:
    """Evaluate the policy for one observation (1-D) or a batch (2-D)."""
    arr = np.asarray(obs, dtype=np.float64)
    single = arr.ndim == 1
    out, _ = _forward(_unpack(params), np.atleast_2d(arr))
    if single:
        return GaussianPolicyOutput(
            mean=out.mean[0], log_std=out.log_std[0], value=out.value[0]
        )
    return out


def gaussian_log_prob(
    actions: ArrayLike, mean: ArrayLike, log_std: ArrayLike
) -> FloatArray:
    """Diagonal-Gaussian log density, summed over the last axis."""
    a = np.asarray(actions, dtype=np.float64)
    mu = np.asarray(mean, dtype=np.float64)
    ls = np.asarray(log_std, dtype=np.float64)
    z = (a - mu) * np.exp(-ls)
    return -0.5 * np.sum(z * z, axis=-1) - np.sum(ls, axis=-1) - 0.5 * a.shape[-1] * LOG_2PI


def gaussian_entropy(log_std: ArrayLike) -> FloatArray:
    ls = np.asarray(log_std, dtype=np.float64)
    return np.sum(ls + 0.5 * (LOG_2PI + 1.0), axis=-1)


def sample_action(
    out: GaussianPolicyOutput, rng: np.random.Generator
) -> tuple[FloatArray, float]:
    """Draw ``mean + exp(log_std) * eps``; the action is left unclamped."""
    eps = rng.standard_normal(out.mean.shape)
    action = out.mean + np.exp(out.log_std) * eps
    return action, float(gaussian_log_prob(action, out.mean, out.log_std))


class Minibatch(Protocol):
    @property
    def observations(self) -> FloatArray: ...


@dataclass(frozen=True, eq=False)
class OutputGradients:
    """Loss value and its gradient with respect to the network outputs."""

    loss: float
    mean: FloatArray
    log_std: FloatArray
    value: FloatArray
    extras: dict[str, float] = field(default_factory=dict[str, float])


class LossDefinition[B: Minibatch](Protocol):
    """A differentiable scalar loss over batch policy outputs."""

    name: str

    def evaluate(self, out: GaussianPolicyOutput, batch: B) -> OutputGradients: ...


def backward[B: Minibatch](
    params: ParamVector, minibatch: B, loss_definition: LossDefinition[B]
) -> ParamVector:
    """Gradient of ``loss_definition`` with respect to ``params``."""
    gradient, _ = value_and_grad(params, minibatch, loss_definition)
    return gradient


def value_and_grad[B: Minibatch](
    params: ParamVector, minibatch: B, loss_definition: LossDefinition[B]
) -> tuple[ParamVector, OutputGradients]:
    """Reverse-mode accumulation through both heads and the shared trunk.

    Returns:
        Tuple of (gradient with the same manifest, evaluated loss and output grads)

    Raises:
        NonFiniteLossError: If the loss is NaN or infinite.
    """
    obs = np.atleast_2d(np.asarray(minibatch.observations, dtype=np.float64))
    if obs.shape[0] == 0:
        raise PolicyError("Cannot differentiate an empty minibatch", "empty")

    net = _unpack(params)
    out, activations = _forward(net, obs)
    result = loss_definition.evaluate(out, minibatch)
    if not math.isfinite(result.loss):
        raise NonFiniteLossError(loss_definition.name)

    g_mean = result.mean
    g_value = result.value[:, None]
    top = activations[-1]

    grads: dict[str, FloatArray] = {
        "mean.weight": top.T @ g_mean,
        "mean.bias": g_mean.sum(axis=0),
        "value.weight": top.T @ g_value,
        "value.bias": g_value.sum(axis=0),
    }
    inside = (net.log_std > LOG_STD_MIN) & (net.log_std < LOG_STD_MAX)
    g_log_std = result.log_std.sum(axis=0) if result.log_std.ndim == 2 else result.log_std
    grads["log_std"] = np.where(inside, g_log_std, 0.0)

    dh = g_mean @ net.mean[0].T + g_value @ net.value[0].T
    for i in reversed(range(len(net.hidden))):
        weight, _ = net.hidden[i]
        h = activations[i + 1]
        dz = dh * (1.0 - h * h)
        grads[f"hidden.{i}.weight"] = activations[i].T @ dz
        grads[f"hidden.{i}.bias"] = dz.sum(axis=0)
        dh = dz @ weight.T

    return params_from_tensors(params.manifest, grads), result
