"""Multi-robot flocking with energy-based local rewards and attention policies."""

__version__ = "0.1.0"
