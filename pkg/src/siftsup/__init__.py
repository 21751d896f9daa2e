"""siftsup: SIFT correspondence supervision for cross-attention."""

__version__ = "0.1.0"
