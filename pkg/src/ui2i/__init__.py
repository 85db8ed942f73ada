"""Unpaired bidirectional image-to-image translation with parameter-based
spectral normalization, attention-equipped U-Net generators, stacked domain
and content discriminators, and a metrics/evaluation harness."""

__version__ = "0.1.0"
