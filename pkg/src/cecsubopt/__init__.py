"""Suboptimality of certainty-equivalent control on scenario trees."""

__version__ = "0.1.0"
