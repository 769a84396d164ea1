"""Identity-aware graph memory network for spatio-temporal action detection."""

__version__ = "0.1.0"
