"""Text-dependent speaker verification with vocal-tract-length perturbed features."""

__version__ = "0.1.0"
