"""Hybrid symbolic, fuzzy and Bayesian knowledge engine for bridging TCM and WM concepts."""

__version__ = "0.1.0"
