"""Adaptive-computation vision transformer tracker with learned block bypassing and dimension pruning."""

__version__ = "0.1.0"
