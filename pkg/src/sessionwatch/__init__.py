"""sessionwatch: misuse detection via behavior clustering and language models."""

__version__ = "0.1.0"
