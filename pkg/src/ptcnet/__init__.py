"""Pseudo-transient continuation for stabilized incompressible flow with learned local time steps."""

__version__ = "0.1.0"
