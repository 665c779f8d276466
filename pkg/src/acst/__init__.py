"""Private content-addressed storage cluster with a deterministic network simulator."""

__version__ = "0.1.0"
