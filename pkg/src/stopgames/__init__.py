"""Solvers and verifiers for two-player stopping games in discrete time."""

__version__ = "0.1.0"
