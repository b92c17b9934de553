"""Unit tests for the Gaussian MLP policy and its gradients."""

import math

import numpy as np
import pytest

from armfleet.core.errors import ConfigError
from armfleet.core.policy import (
    GaussianPolicyOutput,
    MlpSpec,
    ParamVector,
    PolicyError,
    backward,
    gaussian_entropy,
    gaussian_log_prob,
    init_params,
    policy_forward,
    sample_action,
    value_and_grad,
)
from armfleet.core.ppo import (
    KlPenaltyLoss,
    PpoConfig,
    ProcessedBatch,
    SurrogateLoss,
    TotalLoss,
    ValueLoss,
)


def _loss(params, batch, loss_definition):
    return loss_definition.evaluate(policy_forward(params, batch.observations), batch).loss


def _numeric_gradient(params, batch, loss_definition, indices, eps=1e-6):
    grads = []
    for i in indices:
        up = np.array(params.values)
        down = np.array(params.values)
        up[i] += eps
        down[i] -= eps
        grads.append(
            (
                _loss(params.with_values(up), batch, loss_definition)
                - _loss(params.with_values(down), batch, loss_definition)
            )
            / (2 * eps)
        )
    return np.array(grads)


class TestMlpSpec:
    """Test the parameter manifest."""

    def test_reference_param_count(self):
        """Test the size of the 9-input, 3-action, 64x64 network."""
        assert MlpSpec(9, 3, (64, 64)).param_count == 5063

    def test_manifest_order(self):
        """Test that hidden layers come first and log_std last."""
        names = [name for name, _ in MlpSpec(4, 2, (5,)).manifest()]
        assert names == [
            "hidden.0.weight",
            "hidden.0.bias",
            "mean.weight",
            "mean.bias",
            "value.weight",
            "value.bias",
            "log_std",
        ]

    def test_invalid_dimensions(self):
        """Test zero-width layers."""
        with pytest.raises(ConfigError):
            MlpSpec(4, 2, (0,))


class TestParamVector:
    """Test the flat parameter container."""

    def test_init_is_seeded(self):
        """Test that initialisation depends only on the seed."""
        spec = MlpSpec(9, 3, (16,))
        assert init_params(spec, 1).digest() == init_params(spec, 1).digest()
        assert init_params(spec, 1).digest() != init_params(spec, 2).digest()

    def test_init_zero_biases_and_log_std(self):
        """Test the initial bias and log_std tensors."""
        tensors = init_params(MlpSpec(9, 3, (16,)), 0).tensors()
        assert np.all(tensors["hidden.0.bias"] == 0.0)
        assert np.all(tensors["log_std"] == 0.0)
        bound = 1.0 / math.sqrt(9)
        assert np.all(np.abs(tensors["hidden.0.weight"]) <= bound)

    def test_wrong_size_rejected(self):
        """Test a value count that disagrees with the manifest."""
        manifest = MlpSpec(4, 2, (5,)).manifest()
        with pytest.raises(PolicyError) as exc_info:
            ParamVector(values=np.zeros(3), manifest=manifest)
        assert exc_info.value.code == "manifest"

    def test_non_finite_rejected(self):
        """Test NaN parameters."""
        params = init_params(MlpSpec(4, 2, (5,)), 0)
        values = np.array(params.values)
        values[0] = np.nan
        with pytest.raises(PolicyError):
            params.with_values(values)

    def test_values_are_read_only(self):
        """Test that parameters cannot be changed in place."""
        params = init_params(MlpSpec(4, 2, (5,)), 0)
        with pytest.raises(ValueError):
            params.values[0] = 1.0

    def test_digest_ignores_version(self):
        """Test that the digest covers values and manifest only."""
        params = init_params(MlpSpec(4, 2, (5,)), 0)
        assert params.with_values(params.values, version=7).digest() == params.digest()


class TestForward:
    """Test policy evaluation and the Gaussian helpers."""

    def test_single_matches_batch(self):
        """Test that a 1-D observation gives the first row of a batch."""
        params = init_params(MlpSpec(9, 3, (16, 16)), 0)
        obs = np.random.default_rng(0).normal(size=(4, 9))
        batch = policy_forward(params, obs)
        single = policy_forward(params, obs[0])
        assert batch.mean.shape == (4, 3)
        assert batch.value.shape == (4,)
        np.testing.assert_allclose(single.mean, batch.mean[0])
        assert float(single.value) == pytest.approx(float(batch.value[0]))

    def test_wrong_observation_size(self):
        """Test an observation with the wrong width."""
        params = init_params(MlpSpec(9, 3, (16,)), 0)
        with pytest.raises(PolicyError) as exc_info:
            policy_forward(params, np.zeros(5))
        assert exc_info.value.code == "dimension"

    def test_log_std_is_clamped(self):
        """Test that extreme log_std values are clipped on output."""
        spec = MlpSpec(4, 2, (5,))
        params = init_params(spec, 0)
        values = np.array(params.values)
        values[-2:] = [-20.0, 20.0]
        out = policy_forward(params.with_values(values), np.zeros(4))
        np.testing.assert_array_equal(out.log_std, [-5.0, 2.0])

    def test_standard_normal_log_prob(self):
        """Test the log density of a standard normal at its mean."""
        log_prob = gaussian_log_prob(np.zeros(3), np.zeros(3), np.zeros(3))
        assert float(log_prob) == pytest.approx(-1.5 * math.log(2 * math.pi))

    def test_entropy(self):
        """Test the entropy of a unit diagonal Gaussian."""
        assert float(gaussian_entropy(np.zeros(3))) == pytest.approx(
            1.5 * (math.log(2 * math.pi) + 1.0)
        )

    def test_sample_action_is_reproducible(self):
        """Test sampling with identically seeded generators."""
        params = init_params(MlpSpec(9, 3, (16,)), 0)
        out = policy_forward(params, np.ones(9))
        a1, lp1 = sample_action(out, np.random.default_rng(5))
        a2, lp2 = sample_action(out, np.random.default_rng(5))
        np.testing.assert_array_equal(a1, a2)
        assert lp1 == lp2
        assert lp1 == pytest.approx(float(gaussian_log_prob(a1, out.mean, out.log_std)))

    def test_shifted_log_prob(self):
        """Test the density half a unit away from the mean with std 0.5."""
        log_prob = gaussian_log_prob(np.array([0.5]), np.zeros(1), np.array([math.log(0.5)]))
        assert float(log_prob) == pytest.approx(-math.log(0.5) - 0.5 * math.log(2 * math.pi) - 0.5)

    def test_density_integrates_to_one(self):
        """Test a Monte-Carlo integral of the density over a wide box."""
        mean = np.array([0.3, -0.2])
        log_std = np.array([-0.5, 0.2])
        half = 8.0
        points = np.random.default_rng(0).uniform(-half, half, size=(1_000_000, 2))
        weights = np.exp(gaussian_log_prob(points, mean, log_std)) * (2 * half) ** 2
        standard_error = weights.std() / math.sqrt(len(weights))
        assert abs(weights.mean() - 1.0) < 3 * standard_error

    def test_smallest_std_samples_near_mean(self):
        """Test sampling at the lower log_std clamp."""
        out = GaussianPolicyOutput(
            mean=np.array([0.3, -0.2, 0.1]), log_std=np.full(3, -5.0), value=np.array(0.0)
        )
        rng = np.random.default_rng(0)
        for _ in range(100):
            action, log_prob = sample_action(out, rng)
            np.testing.assert_allclose(action, out.mean, rtol=0, atol=10 * math.exp(-5.0))
            assert math.isfinite(log_prob)


class TestGradients:
    """Test hand-written backpropagation against finite differences."""

    @pytest.fixture
    def params(self):
        return init_params(MlpSpec(4, 2, (5, 3)), 11)

    @pytest.fixture
    def batch(self, params):
        rng = np.random.default_rng(0)
        n = 6
        obs = rng.normal(size=(n, 4))
        actions = rng.normal(size=(n, 2))
        out = policy_forward(params, obs)
        # behaviour policy equals the current one, so every ratio is 1
        old_log_probs = gaussian_log_prob(actions, out.mean, out.log_std)
        raw = rng.normal(size=n)
        shifted = params.with_values(params.values + 0.05 * rng.normal(size=params.size))
        return ProcessedBatch(
            observations=obs,
            actions=actions,
            old_log_probs=old_log_probs,
            advantages=rng.normal(size=n),
            value_targets=rng.normal(size=n),
            raw_advantages=raw,
        ).with_old_outputs(shifted)

    @pytest.mark.parametrize(
        "loss_definition",
        [
            ValueLoss(0.7),
            SurrogateLoss(0.2),
            KlPenaltyLoss(0.5),
            TotalLoss(PpoConfig(entropy_coeff=0.01)),
        ],
        ids=["value", "surrogate", "kl", "total"],
    )
    def test_matches_finite_differences(self, params, batch, loss_definition):
        """Test gradient coordinates from every tensor of the network."""
        gradient = backward(params, batch, loss_definition)
        indices = [0, 7, 21, 29, 33, 40, 45, 50, 52, 54, params.size - 2, params.size - 1]
        numeric = _numeric_gradient(params, batch, loss_definition, indices)
        np.testing.assert_allclose(gradient.values[indices], numeric, rtol=1e-5, atol=1e-7)

    def test_gradient_keeps_manifest(self, params, batch):
        """Test that the gradient is a ParamVector of the same layout."""
        gradient = backward(params, batch, ValueLoss(1.0))
        assert gradient.manifest == params.manifest

    def test_empty_minibatch(self, params, batch):
        """Test differentiation of an empty minibatch."""
        empty = batch.subset(np.array([], dtype=np.intp))
        with pytest.raises(PolicyError) as exc_info:
            backward(params, empty, ValueLoss(1.0))
        assert exc_info.value.code == "empty"

    @pytest.mark.parametrize("coeff", [1.0, 0.5])
    def test_value_bias_gradient(self, params, coeff):
        """Test that the value-head bias gradient of one sample is 2c(V - R)."""
        obs = np.array([[0.2, -0.1, 0.4, 0.3]])
        value = float(policy_forward(params, obs).value[0])
        batch = ProcessedBatch(
            observations=obs,
            actions=np.zeros((1, 2)),
            old_log_probs=np.zeros(1),
            advantages=np.zeros(1),
            value_targets=np.array([value - 0.3]),
            raw_advantages=np.zeros(1),
        )
        gradient = backward(params, batch, ValueLoss(coeff))
        assert float(gradient.tensors()["value.bias"][0]) == pytest.approx(2 * coeff * 0.3)
        assert ValueLoss(coeff).evaluate(policy_forward(params, obs), batch).loss == pytest.approx(
            coeff * 0.09
        )


class TestOffPolicyGradients:
    """Test the full loss gradient when the behaviour policy differs from the current one."""

    @staticmethod
    def _case(seed):
        rng = np.random.default_rng(seed)
        base = init_params(MlpSpec(4, 2, (5, 3)), seed)
        params = base.with_values(base.values + 0.3 * rng.normal(size=base.size))
        old = base.with_values(params.values + 0.3 * rng.normal(size=base.size))
        n = 8
        obs = rng.normal(size=(n, 4))
        old_out = policy_forward(old, obs)
        actions = old_out.mean + np.exp(old_out.log_std) * rng.normal(size=(n, 2))
        return params, ProcessedBatch(
            observations=obs,
            actions=actions,
            old_log_probs=gaussian_log_prob(actions, old_out.mean, old_out.log_std),
            advantages=rng.normal(size=n),
            value_targets=rng.normal(size=n),
            raw_advantages=rng.normal(size=n),
        ).with_old_outputs(old)

    def test_twenty_random_cases(self):
        """Test every gradient coordinate over 20 seeded cases."""
        loss_definition = TotalLoss(PpoConfig(kl_coeff=0.3, entropy_coeff=0.01))
        clip_fractions = []
        for seed in range(20):
            params, batch = self._case(seed)
            gradient, result = value_and_grad(params, batch, loss_definition)
            numeric = _numeric_gradient(
                params, batch, loss_definition, range(params.size), eps=1e-5
            )
            error = np.max(np.abs(gradient.values - numeric)) / np.max(np.abs(numeric))
            assert error < 1e-4, f"seed {seed}: relative error {error:.3g}"
            clip_fractions.append(result.extras["clip_fraction"])

        # the clipped branch is exercised too
        assert max(clip_fractions) > 0.0
