"""Target-speaker active speaker detection."""

__version__ = "0.1.0"
