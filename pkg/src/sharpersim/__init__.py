"""Sharded permissioned-blockchain consensus over a simulated network."""

__version__ = "0.1.0"
