"""State-space message passing on graphs with spectral diagnostics."""

__version__ = "0.1.0"
