"""Incremental CTR training with feature-level and model-level priors."""

__version__ = "0.1.0"
