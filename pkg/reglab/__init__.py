"""Numerical laboratory for latent-extraction + guided-ODE posterior sampling on analytic mixtures."""

__version__ = "0.1.0"
