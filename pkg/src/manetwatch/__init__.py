"""MANET routing under a shared PPO policy, watched by per-node TD-error detectors."""

__version__ = "0.1.0"
