"""Join-order optimization with deep reinforcement learning over a main-memory cost model."""

__version__ = "0.1.0"
