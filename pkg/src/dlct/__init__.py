"""Dual-level collaborative transformer for image captioning, on a numpy autodiff core."""

__version__ = "0.1.0"
