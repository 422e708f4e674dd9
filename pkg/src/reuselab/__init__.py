"""Desk-scale laboratory for Transformers that reuse attention scores across layers."""

__version__ = "0.1.0"
