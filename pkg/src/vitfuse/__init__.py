"""Frozen-ViT feature injection detector: toy-scale, fully verifiable."""

__version__ = "0.1.0"
