"""Noise-perturbed fine-tuning of a tiny language model ahead of low-bit quantization."""

__version__ = "0.1.0"
