"""Desk-scale CTC speech recognizer with a token-dependent cross-attention
knowledge-transfer training branch and a context-aware shift alignment."""

__version__ = "0.1.0"
