"""Heterogeneous domain adaptation with separate encoders and latent alignment."""

__version__ = "0.1.0"
