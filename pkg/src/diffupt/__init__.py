"""Diffusion-based synthetic pretraining workbench for imbalanced binary classification."""

__version__ = "0.1.0"
