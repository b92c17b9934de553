"""Proximal policy optimization: advantages, clipped/KL loss and minibatch SGD.

The learner is a set of pure functions over value types. Each loss term is an
object implementing ``LossDefinition[ProcessedBatch]``, so ``policy.backward``
can differentiate any single term or the combined ``TotalLoss``.
"""

import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Literal, cast

import numpy as np
import yaml
from numpy.typing import NDArray
from rich.console import Console

from armfleet.core.errors import ArmfleetError, ConfigError
from armfleet.core.policy import (
    GaussianPolicyOutput,
    OutputGradients,
    ParamVector,
    gaussian_entropy,
    gaussian_log_prob,
    policy_forward,
    value_and_grad,
)
from armfleet.core.rollout import RolloutBatch

FloatArray = NDArray[np.float64]

console = Console(stderr=True)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8
KL_COEFF_MIN = 1e-4
KL_COEFF_MAX = 64.0
KL_EARLY_STOP_FACTOR = 4.0


class LearnerError(ArmfleetError):
    """Problem inside a local policy update."""


class AdvantageError(LearnerError):
    """Rewards or value estimates are unusable for advantage estimation."""


class RatioOverflowError(LearnerError):
    """The probability ratio of one sample overflowed."""

    def __init__(self, index: int):
        self.index = index
        super().__init__(
            f"Probability ratio of sample {index} is not finite", "ratio_overflow"
        )


@dataclass(frozen=True)
class PpoConfig:
    """PPO hyperparameters, keyed by the names used in experiment configs."""

    gamma: float = 0.995
    horizon: int = 2048
    kl_coeff: float = 0.2
    kl_target: float = 0.01
    num_sgd_iter: int = 30
    sgd_stepsize: float = 5e-5
    sgd_batchsize: int = 128
    vf_loss_coeff: float = 1.0
    clip_epsilon: float = 0.2
    gae_lambda: float = 0.95
    timesteps_per_batch: int = 16000
    min_steps_per_task: int = 2048
    rollout_batchsize: int = 1
    num_workers: int = 1
    entropy_coeff: float = 0.0
    optimizer: Literal["adam", "sgd"] = "adam"
    local_rounds: int = 1
    merge_weighting: Literal["equal", "steps"] = "equal"
    hidden_sizes: tuple[int, ...] = (64, 64)

    def __post_init__(self) -> None:
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError(f"gamma must be in (0, 1] (got {self.gamma})")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ConfigError(f"gae_lambda must be in [0, 1] (got {self.gae_lambda})")
        if not self.clip_epsilon > 0.0:
            raise ConfigError(f"clip_epsilon must be > 0 (got {self.clip_epsilon})")
        for name in ("kl_coeff", "vf_loss_coeff", "entropy_coeff"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0.0:
                raise ConfigError(f"{name} must be finite and >= 0 (got {value})")
        for name in ("kl_target", "sgd_stepsize"):
            value = getattr(self, name)
            if not math.isfinite(value) or value <= 0.0:
                raise ConfigError(f"{name} must be finite and > 0 (got {value})")
        for name in (
            "horizon",
            "num_sgd_iter",
            "sgd_batchsize",
            "timesteps_per_batch",
            "min_steps_per_task",
            "num_workers",
            "local_rounds",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1 (got {getattr(self, name)})")
        if self.sgd_batchsize > self.timesteps_per_batch:
            raise ConfigError(
                f"sgd_batchsize ({self.sgd_batchsize}) exceeds "
                f"timesteps_per_batch ({self.timesteps_per_batch})"
            )
        if self.rollout_batchsize != 1:
            raise ConfigError(
                "rollout_batchsize is the number of simultaneous environments per "
                f"worker and only 1 is supported (got {self.rollout_batchsize})"
            )
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd' (got {self.optimizer!r})")
        if self.merge_weighting not in ("equal", "steps"):
            raise ConfigError(
                f"merge_weighting must be 'equal' or 'steps' (got {self.merge_weighting!r})"
            )
        if not self.hidden_sizes or any(h < 1 for h in self.hidden_sizes):
            raise ConfigError(f"hidden_sizes must be positive (got {self.hidden_sizes})")

    def rollout_target(self) -> int:
        """Steps each worker collects per round."""
        share = math.ceil(self.timesteps_per_batch / self.num_workers)
        return max(self.min_steps_per_task, share)

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["hidden_sizes"] = list(self.hidden_sizes)
        return data

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "PpoConfig":
        """Build a config from a flat mapping; unknown keys are warned about."""
        known = {f.name: f for f in fields(cls)}
        kwargs: dict[str, Any] = {}
        for key, raw in data.items():
            if key not in known:
                console.print(f"[yellow]⚠ Ignoring unknown PPO config key '{key}'[/yellow]")
                continue
            default = known[key].default
            try:
                if key == "hidden_sizes":
                    kwargs[key] = tuple(int(v) for v in cast(list[Any], raw))
                elif isinstance(default, bool) or isinstance(default, str):
                    kwargs[key] = str(raw)
                elif isinstance(default, int):
                    if isinstance(raw, float) and not raw.is_integer():
                        raise ValueError(f"expected an integer, got {raw}")
                    kwargs[key] = int(raw)
                else:
                    kwargs[key] = float(raw)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"Invalid value for '{key}': {e}") from e
        return cls(**kwargs)

    @classmethod
    def from_yaml(cls, text: str) -> "PpoConfig":
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise ConfigError(f"PPO config is not valid YAML: {e}") from e
        if data is None:
            return cls()
        if not isinstance(data, dict):
            raise ConfigError("PPO config must be a key-value mapping")
        return cls.from_dict(cast(dict[str, Any], data))

    @classmethod
    def load(cls, path: str | Path) -> "PpoConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"Cannot read PPO config {path}: {e}") from e
        return cls.from_yaml(text)


SCARA3_OVERRIDES: dict[str, Any] = {"num_sgd_iter": 50, "sgd_batchsize": 2048}

# The six-joint task is more sensitive to step size as the merged batch grows.
ARM6_WORKER_OVERRIDES: dict[int, dict[str, Any]] = {
    1: {"sgd_stepsize": 1e-4},
    2: {"sgd_stepsize": 1e-4},
    4: {"sgd_stepsize": 5e-5},
    8: {"sgd_stepsize": 5e-5, "kl_target": 0.02},
    16: {"sgd_stepsize": 3e-5, "kl_target": 0.02},
}


def preset_config(env: str, num_workers: int = 1) -> PpoConfig:
    """Tuned defaults for a built-in task at a given worker count."""
    if env == "scara3":
        return PpoConfig(num_workers=num_workers, **SCARA3_OVERRIDES)
    if env == "arm6":
        overrides = dict(SCARA3_OVERRIDES)
        overrides.update(ARM6_WORKER_OVERRIDES.get(num_workers, {}))
        return PpoConfig(num_workers=num_workers, **overrides)
    raise ConfigError(f"No PPO preset for environment '{env}'")


@dataclass(frozen=True, eq=False)
class ProcessedBatch:
    """Column-aligned learner input.

    ``old_means``/``old_log_stds`` are the behaviour policy's outputs; they are
    filled by ``with_old_outputs`` and feed the KL term.
    """

    observations: FloatArray
    actions: FloatArray
    old_log_probs: FloatArray
    advantages: FloatArray
    value_targets: FloatArray
    raw_advantages: FloatArray
    old_means: FloatArray | None = None
    old_log_stds: FloatArray | None = None

    def __post_init__(self) -> None:
        n = len(self.observations)
        columns = ("actions", "old_log_probs", "advantages", "value_targets", "raw_advantages")
        for name in columns:
            if len(getattr(self, name)) != n:
                raise LearnerError(f"Column '{name}' length differs from observations")
        if not np.all(np.isfinite(self.old_log_probs)):
            raise LearnerError("old_log_probs contain non-finite values", "non_finite")

    def __len__(self) -> int:
        return len(self.observations)

    def with_old_outputs(self, old_params: ParamVector) -> "ProcessedBatch":
        out = policy_forward(old_params, self.observations)
        return replace(self, old_means=out.mean, old_log_stds=out.log_std)

    def subset(self, indices: NDArray[np.intp]) -> "ProcessedBatch":
        return ProcessedBatch(
            observations=self.observations[indices],
            actions=self.actions[indices],
            old_log_probs=self.old_log_probs[indices],
            advantages=self.advantages[indices],
            value_targets=self.value_targets[indices],
            raw_advantages=self.raw_advantages[indices],
            old_means=None if self.old_means is None else self.old_means[indices],
            old_log_stds=None if self.old_log_stds is None else self.old_log_stds[indices],
        )


def compute_advantages(
    rollout: RolloutBatch, gamma: float, lam: float, normalize: bool = True
) -> ProcessedBatch:
    """Generalized advantage estimation within each episode.

    Every episode bootstraps with a zero value after its last step. Value
    targets are formed from the raw advantages before normalization.

    Raises:
        AdvantageError: On an empty rollout or non-finite rewards/values.
    """
    if rollout.total_steps == 0:
        raise AdvantageError("Cannot compute advantages of an empty rollout", "empty")
    rewards = np.asarray(rollout.rewards, dtype=np.float64)
    values = np.asarray(rollout.values, dtype=np.float64)
    if not (np.all(np.isfinite(rewards)) and np.all(np.isfinite(values))):
        raise AdvantageError("Rollout contains non-finite rewards or values", "non_finite")

    raw = np.zeros_like(rewards)
    for episode in rollout.episode_slices():
        r = rewards[episode]
        v = values[episode]
        next_v = np.append(v[1:], 0.0)
        deltas = r + gamma * next_v - v
        running = 0.0
        adv = np.empty_like(deltas)
        for t in range(len(deltas) - 1, -1, -1):
            running = deltas[t] + gamma * lam * running
            adv[t] = running
        raw[episode] = adv

    targets = raw + values
    advantages = raw.copy()
    if normalize:
        centered = advantages - advantages.mean()
        std = centered.std()
        advantages = centered / std if std > 1e-8 else centered

    return ProcessedBatch(
        observations=np.asarray(rollout.observations, dtype=np.float64),
        actions=np.asarray(rollout.actions, dtype=np.float64),
        old_log_probs=np.asarray(rollout.log_probs, dtype=np.float64),
        advantages=advantages,
        value_targets=targets,
        raw_advantages=raw,
    )


def _log_prob_grads(
    out: GaussianPolicyOutput, actions: FloatArray, weight: FloatArray
) -> tuple[FloatArray, FloatArray]:
    """Chain ``weight * d log_prob`` to the mean and log_std outputs."""
    inv_std = np.exp(-out.log_std)
    z = (actions - out.mean) * inv_std
    w = weight[:, None]
    return w * z * inv_std, w * (z * z - 1.0)


@dataclass(frozen=True)
class SurrogateLoss:
    """Negated clipped surrogate objective."""

    clip_epsilon: float
    name: str = "surrogate"

    def evaluate(self, out: GaussianPolicyOutput, batch: ProcessedBatch) -> OutputGradients:
        n = len(batch)
        log_prob = gaussian_log_prob(batch.actions, out.mean, out.log_std)
        with np.errstate(over="ignore", invalid="ignore"):
            ratio = np.exp(log_prob - batch.old_log_probs)
        bad = np.flatnonzero(~np.isfinite(ratio))
        if bad.size:
            raise RatioOverflowError(int(bad[0]))

        adv = batch.advantages
        unclipped = ratio * adv
        clipped = np.clip(ratio, 1.0 - self.clip_epsilon, 1.0 + self.clip_epsilon) * adv
        objective = np.minimum(unclipped, clipped)
        # the gradient flows only where the unclipped branch is selected
        active = unclipped <= clipped
        d_log_prob = np.where(active, -ratio * adv / n, 0.0)
        g_mean, g_log_std = _log_prob_grads(out, batch.actions, d_log_prob)
        clip_fraction = float(np.mean(np.abs(ratio - 1.0) > self.clip_epsilon))
        return OutputGradients(
            loss=float(-objective.mean()),
            mean=g_mean,
            log_std=g_log_std,
            value=np.zeros(n),
            extras={"clip_fraction": clip_fraction},
        )


def _require_old_outputs(batch: ProcessedBatch) -> tuple[FloatArray, FloatArray]:
    if batch.old_means is None or batch.old_log_stds is None:
        raise LearnerError("Batch has no behaviour-policy outputs for the KL term")
    return batch.old_means, batch.old_log_stds


def gaussian_kl(
    old_mean: FloatArray, old_log_std: FloatArray, mean: FloatArray, log_std: FloatArray
) -> FloatArray:
    """KL(old || new) of diagonal Gaussians, summed over the last axis."""
    var_ratio = np.exp(2.0 * (old_log_std - log_std))
    shift = (mean - old_mean) ** 2 * np.exp(-2.0 * log_std)
    return np.sum(log_std - old_log_std + 0.5 * (var_ratio + shift) - 0.5, axis=-1)


@dataclass(frozen=True)
class KlPenaltyLoss:
    coeff: float
    name: str = "kl_penalty"

    def evaluate(self, out: GaussianPolicyOutput, batch: ProcessedBatch) -> OutputGradients:
        old_mean, old_log_std = _require_old_outputs(batch)
        n = len(batch)
        kl = gaussian_kl(old_mean, old_log_std, out.mean, out.log_std)
        inv_var = np.exp(-2.0 * out.log_std)
        scale = self.coeff / n
        g_mean = scale * (out.mean - old_mean) * inv_var
        spread = np.exp(2.0 * old_log_std) + (out.mean - old_mean) ** 2
        g_log_std = scale * (1.0 - spread * inv_var)
        mean_kl = float(kl.mean())
        return OutputGradients(
            loss=self.coeff * mean_kl,
            mean=g_mean,
            log_std=g_log_std,
            value=np.zeros(n),
            extras={"mean_kl": mean_kl},
        )


@dataclass(frozen=True)
class ValueLoss:
    coeff: float
    name: str = "value_loss"

    def evaluate(self, out: GaussianPolicyOutput, batch: ProcessedBatch) -> OutputGradients:
        n = len(batch)
        error = out.value - batch.value_targets
        mse = float(np.mean(error * error))
        return OutputGradients(
            loss=self.coeff * mse,
            mean=np.zeros_like(out.mean),
            log_std=np.zeros_like(out.log_std),
            value=2.0 * self.coeff * error / n,
            extras={"value_loss": mse},
        )


@dataclass(frozen=True)
class EntropyBonus:
    coeff: float
    name: str = "entropy"

    def evaluate(self, out: GaussianPolicyOutput, batch: ProcessedBatch) -> OutputGradients:
        n = len(batch)
        entropy = float(np.mean(gaussian_entropy(out.log_std)))
        return OutputGradients(
            loss=-self.coeff * entropy,
            mean=np.zeros_like(out.mean),
            log_std=np.full_like(out.log_std, -self.coeff / n),
            value=np.zeros(n),
            extras={"entropy": entropy},
        )


@dataclass(frozen=True)
class LossBreakdown:
    """Components of the PPO objective for one evaluation."""

    surrogate: float
    kl_penalty: float
    value_loss: float
    entropy: float
    total: float
    mean_kl: float
    clip_fraction: float

    @classmethod
    def build(
        cls,
        cfg: PpoConfig,
        surrogate: float,
        mean_kl: float,
        value_loss: float,
        entropy: float,
        clip_fraction: float,
    ) -> "LossBreakdown":
        kl_penalty = cfg.kl_coeff * mean_kl
        total = surrogate + kl_penalty + cfg.vf_loss_coeff * value_loss - cfg.entropy_coeff * entropy
        return cls(
            surrogate=surrogate,
            kl_penalty=kl_penalty,
            value_loss=value_loss,
            entropy=entropy,
            total=total,
            mean_kl=mean_kl,
            clip_fraction=clip_fraction,
        )

    @classmethod
    def average(cls, cfg: PpoConfig, records: list["LossBreakdown"]) -> "LossBreakdown":
        if not records:
            raise LearnerError("No loss records to average")
        return cls.build(
            cfg,
            surrogate=float(np.mean([r.surrogate for r in records])),
            mean_kl=float(np.mean([r.mean_kl for r in records])),
            value_loss=float(np.mean([r.value_loss for r in records])),
            entropy=float(np.mean([r.entropy for r in records])),
            clip_fraction=float(np.mean([r.clip_fraction for r in records])),
        )


@dataclass(frozen=True)
class TotalLoss:
    """Sum of all PPO terms with the coefficients of ``cfg``."""

    cfg: PpoConfig
    name: str = "total"

    def terms(self) -> tuple[SurrogateLoss, KlPenaltyLoss, ValueLoss, EntropyBonus]:
        return (
            SurrogateLoss(self.cfg.clip_epsilon),
            KlPenaltyLoss(self.cfg.kl_coeff),
            ValueLoss(self.cfg.vf_loss_coeff),
            EntropyBonus(self.cfg.entropy_coeff),
        )

    def evaluate(self, out: GaussianPolicyOutput, batch: ProcessedBatch) -> OutputGradients:
        results = [term.evaluate(out, batch) for term in self.terms()]
        extras: dict[str, float] = {}
        for result in results:
            extras.update(result.extras)
        extras["surrogate"] = results[0].loss
        breakdown = breakdown_from_extras(self.cfg, extras)
        return OutputGradients(
            loss=breakdown.total,
            mean=sum((r.mean for r in results), np.zeros_like(out.mean)),
            log_std=sum((r.log_std for r in results), np.zeros_like(out.log_std)),
            value=sum((r.value for r in results), np.zeros_like(out.value)),
            extras=extras,
        )


def breakdown_from_extras(cfg: PpoConfig, extras: dict[str, float]) -> LossBreakdown:
    return LossBreakdown.build(
        cfg,
        surrogate=extras["surrogate"],
        mean_kl=extras["mean_kl"],
        value_loss=extras["value_loss"],
        entropy=extras["entropy"],
        clip_fraction=extras["clip_fraction"],
    )


def ppo_loss(
    params: ParamVector, old_params: ParamVector, batch: ProcessedBatch, cfg: PpoConfig
) -> LossBreakdown:
    """Evaluate the PPO objective of ``params`` against the behaviour policy."""
    if batch.old_means is None:
        batch = batch.with_old_outputs(old_params)
    out = policy_forward(params, np.atleast_2d(batch.observations))
    result = TotalLoss(cfg).evaluate(out, batch)
    return breakdown_from_extras(cfg, result.extras)


def sgd_update(
    params: ParamVector,
    batch: ProcessedBatch,
    cfg: PpoConfig,
    rng: np.random.Generator,
) -> tuple[ParamVector, list[LossBreakdown]]:
    """Run ``num_sgd_iter`` shuffled epochs of minibatch descent.

    The trailing partial minibatch of each epoch is dropped. The loop stops
    early once an epoch's mean KL exceeds four times ``kl_target``.

    Returns:
        Tuple of (updated parameters with version + 1, one breakdown per epoch)
    """
    n = len(batch)
    size = cfg.sgd_batchsize
    if n < size:
        raise LearnerError(
            f"Batch of {n} samples is smaller than sgd_batchsize {size}", "batch_size"
        )

    batch = batch.with_old_outputs(params)
    loss = TotalLoss(cfg)
    values = np.array(params.values, dtype=np.float64)
    first_moment = np.zeros_like(values)
    second_moment = np.zeros_like(values)
    step = 0
    epochs: list[LossBreakdown] = []

    for epoch in range(cfg.num_sgd_iter):
        order = rng.permutation(n)
        records: list[LossBreakdown] = []
        for start in range(0, n - size + 1, size):
            minibatch = batch.subset(order[start : start + size])
            gradient, result = value_and_grad(params.with_values(values), minibatch, loss)
            records.append(breakdown_from_extras(cfg, result.extras))
            g = np.asarray(gradient.values)
            if cfg.optimizer == "adam":
                step += 1
                first_moment = ADAM_BETA1 * first_moment + (1.0 - ADAM_BETA1) * g
                second_moment = ADAM_BETA2 * second_moment + (1.0 - ADAM_BETA2) * g * g
                m_hat = first_moment / (1.0 - ADAM_BETA1**step)
                v_hat = second_moment / (1.0 - ADAM_BETA2**step)
                values = values - cfg.sgd_stepsize * m_hat / (np.sqrt(v_hat) + ADAM_EPSILON)
            else:
                values = values - cfg.sgd_stepsize * g

        summary = LossBreakdown.average(cfg, records)
        epochs.append(summary)
        if summary.mean_kl > KL_EARLY_STOP_FACTOR * cfg.kl_target:
            console.print(
                f"[dim]KL {summary.mean_kl:.4g} above {KL_EARLY_STOP_FACTOR:g}x target, "
                f"stopping after epoch {epoch + 1}[/dim]"
            )
            break

    return params.with_values(values, version=params.version + 1), epochs


def adapt_kl_coeff(kl_coeff: float, measured_kl: float, kl_target: float) -> float:
    """Double or halve the KL coefficient outside a 1.5x dead zone."""
    if kl_coeff == 0.0:
        return 0.0
    if measured_kl > 1.5 * kl_target:
        kl_coeff *= 2.0
    elif measured_kl < kl_target / 1.5:
        kl_coeff /= 2.0
    return min(max(kl_coeff, KL_COEFF_MIN), KL_COEFF_MAX)
