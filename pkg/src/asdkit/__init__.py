"""Anomalous sound detection: gammatone features + convolutional autoencoders."""

__version__ = "0.1.0"
