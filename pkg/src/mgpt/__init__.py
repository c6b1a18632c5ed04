"""Multi-behavior sequential recommendation with interaction-level graphs and multi-grained attention."""

__version__ = "0.1.0"
