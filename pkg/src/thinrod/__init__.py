"""Asymptotic eigenvalue expansions for thin curved twisted rods."""

__version__ = "0.1.0"
