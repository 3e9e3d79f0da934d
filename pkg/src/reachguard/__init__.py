"""Reach-avoid gameplay safety filters: environments, DP oracle, self-play training, filters, stress tests."""

__version__ = "0.1.0"
