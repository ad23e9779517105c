"""Hierarchical reinforcement learning for intersection navigation with
goal-conditioned collision prediction."""

__version__ = "0.1.0"
