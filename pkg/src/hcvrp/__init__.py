"""Constructive deep-RL solver for heterogeneous capacitated vehicle routing."""

__version__ = "0.1.0"
