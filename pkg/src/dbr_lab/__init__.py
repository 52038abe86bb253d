"""Disagreement-based regression under covariate shift, with offline and
online reinforcement-learning variants on finite classes."""

__version__ = "0.1.0"
