"""Trajectory and transportation-mode recovery from cellular measurement records."""

__version__ = "0.1.0"
