"""Desk-scale protective perturbations against pixel-domain diffusion editing."""

__version__ = "0.1.0"
