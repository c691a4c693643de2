"""Attention-based word alignment and attribution analysis for a small
numpy Transformer translation model."""

__version__ = "0.1.0"
