"""Synthetic trajectories from a latent-segmented conditional diffusion model."""

__version__ = "0.1.0"
