"""Bayesian enhancement model: two-stage BNN/DNN image enhancement at desk scale."""

__version__ = "0.1.0"
