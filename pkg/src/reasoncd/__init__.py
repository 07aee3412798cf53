"""Prompt-conditioned bitemporal change detection, trainable from scratch.

The package wires a small decoder-only language model, a ViT image encoder
shared across both acquisition dates, a convolutional difference-feature
branch, and a prompt-conditioned mask decoder into one pipeline that answers
a change question in text and paints the matching change mask.
"""

__version__ = "0.1.0"
