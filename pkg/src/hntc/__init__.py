"""Hybrid noisy tensor completion of beam-power maps and position-aided beam recommendation."""

__version__ = "0.1.0"
