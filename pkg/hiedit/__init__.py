"""Hypothetical-instruction image editing: reasoning cues, guidance LM and latent diffusion at desk scale."""

__version__ = "0.1.0"
