"""Diffusion-policy pretraining, preference reward learning, and RL fine-tuning."""

__version__ = "0.1.0"
