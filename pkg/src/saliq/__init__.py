"""Saliency-aware partial retraining for ultra-low-bit weight quantization,
at a scale that runs on one CPU core."""

__version__ = "0.1.0"
