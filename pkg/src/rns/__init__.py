"""Review-driven neural sequential recommendation."""

__version__ = "0.1.0"
