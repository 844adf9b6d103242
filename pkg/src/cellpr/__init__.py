"""Feature-guided posterior regularization for multi-class cell detection and counting."""

__version__ = "0.1.0"
