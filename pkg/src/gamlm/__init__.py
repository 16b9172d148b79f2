"""Global autoregressive models on motif-filtered binary strings."""

__version__ = "0.1.0"
