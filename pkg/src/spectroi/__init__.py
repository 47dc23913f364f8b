"""Spectral photon-counting CT simulation and ROI-wise material decomposition."""

__version__ = "0.1.0"
