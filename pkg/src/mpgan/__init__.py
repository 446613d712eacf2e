"""Multi-patch generative zero-shot learning on numpy."""

__version__ = "0.1.0"
