"""Unit tests for RolloutBatch."""

import numpy as np
import pytest

from armfleet.core.errors import ArmfleetError
from armfleet.core.rollout import RolloutBatch, RolloutError


class TestRolloutBatch:
    """Test column validation and episode statistics."""

    def test_episode_slices(self, make_rollout):
        batch = make_rollout([1.0, 2.0, 3.0, 4.0, 5.0], (2, 5))
        assert batch.total_steps == 5
        assert batch.episode_slices() == [slice(0, 2), slice(2, 5)]

    def test_mean_episode_reward_is_per_step(self, make_rollout):
        """Test that each episode contributes its per-step mean."""
        batch = make_rollout([-1.0, -3.0, -0.5, -0.5, -0.5], (2, 5))
        np.testing.assert_allclose(batch.episode_mean_rewards(), [-2.0, -0.5])
        assert batch.mean_episode_reward() == pytest.approx(-1.25)

    def test_mismatched_columns(self):
        with pytest.raises(RolloutError, match="different length"):
            RolloutBatch(
                observations=np.zeros((3, 9)),
                actions=np.zeros((2, 3)),
                log_probs=np.zeros(3),
                rewards=np.zeros(3),
                values=np.zeros(3),
                dones=np.array([False, False, True]),
                episode_boundaries=(3,),
            )

    def test_partial_trailing_episode_rejected(self, make_rollout):
        """Test that the last boundary must close the batch."""
        with pytest.raises(RolloutError, match="Last episode boundary"):
            RolloutBatch(
                observations=np.zeros((3, 9)),
                actions=np.zeros((3, 3)),
                log_probs=np.zeros(3),
                rewards=np.zeros(3),
                values=np.zeros(3),
                dones=np.array([False, True, False]),
                episode_boundaries=(2,),
            )

    def test_done_flags_must_match(self):
        with pytest.raises(RolloutError, match="Done flags"):
            RolloutBatch(
                observations=np.zeros((4, 9)),
                actions=np.zeros((4, 3)),
                log_probs=np.zeros(4),
                rewards=np.zeros(4),
                values=np.zeros(4),
                dones=np.array([True, False, False, True]),
                episode_boundaries=(2, 4),
            )

    def test_boundaries_must_increase(self):
        with pytest.raises(ArmfleetError) as exc_info:
            RolloutBatch(
                observations=np.zeros((4, 9)),
                actions=np.zeros((4, 3)),
                log_probs=np.zeros(4),
                rewards=np.zeros(4),
                values=np.zeros(4),
                dones=np.array([False, False, False, True]),
                episode_boundaries=(4, 4),
            )
        assert isinstance(exc_info.value, RolloutError)
        assert exc_info.value.code == "boundaries"
