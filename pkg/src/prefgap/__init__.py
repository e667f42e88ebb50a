"""Exact desk-scale lab for two-stage RLHF vs direct preference optimization."""

__version__ = "0.1.0"
