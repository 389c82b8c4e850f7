"""Self-supervised single-image de-raining built on attention-derived rain-streak prototypes."""

__version__ = "0.1.0"
