"""Reward-aligned distillation of one-step generators with score-based divergence
regularisation, on low-dimensional problems with closed-form oracles."""

__version__ = "0.1.0"
