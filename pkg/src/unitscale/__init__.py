"""Unit scaling: fixed forward/backward scale factors for low-precision training."""

__version__ = "0.1.0"
