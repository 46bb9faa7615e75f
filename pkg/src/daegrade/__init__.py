"""Vertebral fracture grading from the semantic latent space of a diffusion autoencoder."""

__version__ = "0.1.0"
