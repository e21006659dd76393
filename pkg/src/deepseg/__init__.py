"""Modular encoder-decoder engine for binary brain-tumor segmentation."""

__version__ = "0.1.0"
