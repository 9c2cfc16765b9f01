"""Hyperspectral waste classification and learned hydraulic joint control."""

__version__ = "0.1.0"
