"""swct: swallowing 4D-CT segmentation, evaluation and motion visualization."""

__version__ = "0.1.0"
