"""Coverage-calibrated simulation-based inference toolkit."""

__version__ = "0.1.0"
