"""Federated LoRA simulator: Gram-matrix aggregation against factor-averaging baselines."""

__version__ = "0.1.0"
