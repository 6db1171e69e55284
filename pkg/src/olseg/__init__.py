"""Retinal layer segmentation of OCT volumes with cross-slice feature fusion."""

__version__ = "0.1.0"
