"""Privacy-preserving task-oriented semantic communication benchmark."""

__version__ = "0.1.0"
