"""Crossover patch networks for segmenting non-elongated structures."""

__version__ = "0.1.0"
