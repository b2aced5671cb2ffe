"""Relational hallucination detection and mitigation for multivariate time series
with a diffusion imputer."""

__version__ = "0.1.0"
