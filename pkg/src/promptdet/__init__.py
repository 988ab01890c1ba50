"""Prompt-conditioned DETR-style detection on a numpy autodiff core."""
__version__ = "0.1.0"
