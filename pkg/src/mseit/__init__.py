"""Multiscale PCA-reduced adjoint reconstruction for electrical impedance tomography."""

__version__ = "0.1.0"
