"""Patch-wise cross-modal feature mix-up captioning at desk scale."""

__version__ = "0.1.0"
