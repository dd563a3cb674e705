"""Selective state-space autoencoder and latent GAN for parametric CAD sequences."""

__version__ = "0.1.0"
