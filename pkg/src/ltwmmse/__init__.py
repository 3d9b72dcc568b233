"""Two-timescale weighted sum-rate maximization for cellular and cell-free massive MIMO uplinks."""

__version__ = "0.1.0"
