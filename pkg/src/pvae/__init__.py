"""Multimodal VAE with one shared semantic latent and per-modality style latents."""

__version__ = "0.1.0"
