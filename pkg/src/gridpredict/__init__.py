"""Data-driven multi-step prediction of power-network transient trajectories."""

__version__ = "0.1.0"
