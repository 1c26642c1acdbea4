"""Partially recentralized softmax loss, BIM attacks and caption metrics at desk scale."""

__version__ = "0.1.0"
