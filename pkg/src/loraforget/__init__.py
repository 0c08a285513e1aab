"""Selective forgetting for small segmentation and classification nets via low-rank adapters."""

__version__ = "0.1.0"
