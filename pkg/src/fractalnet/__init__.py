"""Fractal networks with drop-path, trained on a small numpy engine."""

__version__ = "0.1.0"
