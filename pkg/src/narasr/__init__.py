"""Non-autoregressive speech recognizer with a masked-LM decoder, desk scale."""

__version__ = "0.1.0"
