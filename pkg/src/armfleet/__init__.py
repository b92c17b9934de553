"""armfleet - Distributed PPO training for kinematic robot-arm reacher tasks."""

__version__ = "0.4.0"
__author__ = "Michael Borck"
__email__ = "michael.borck@curtin.edu.au"
