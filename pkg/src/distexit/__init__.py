"""Distance-enhanced early exiting for multi-exit classifiers."""

__version__ = "0.1.0"
