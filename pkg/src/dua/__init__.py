"""Dual attentive transformer for trial-level classification of variable-length
multichannel feature sequences, with adversarial domain adaptation."""

__version__ = "0.1.0"
