"""Verifiable navigation worlds: scene generation, embodied environments and co-evolution."""

__version__ = "0.1.0"
