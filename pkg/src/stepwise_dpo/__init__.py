"""Step-wise reward-weighted DPO on a chain-arithmetic toy environment."""

__version__ = "0.1.0"
