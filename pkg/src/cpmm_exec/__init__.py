"""Optimal execution in a constant-product AMM coupled to a centralised exchange."""

__version__ = "0.1.0"
