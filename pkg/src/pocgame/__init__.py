"""Proof-of-contribution consensus simulation over an edge resource-allocation game."""

__version__ = "0.1.0"
