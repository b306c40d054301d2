"""Scribble-supervised segmentation with a latent-variable label generator,
pseudo-labels and MC-dropout uncertainty."""

__version__ = "0.1.0"
