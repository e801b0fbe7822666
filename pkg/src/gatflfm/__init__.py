"""Gaussian-kernel tomography for Fourier light-field microscopy."""

__version__ = "0.1.0"
