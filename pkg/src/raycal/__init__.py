"""Differentiable radio ray tracing and calibration of material, antenna and scattering models."""

__version__ = "0.1.0"
