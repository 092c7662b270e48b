"""Multi-level multiple-instance learning with messenger-token transformers."""

__version__ = "0.1.0"
