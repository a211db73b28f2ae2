"""gesttoken: two-stage co-speech gesture pipeline on a synthetic corpus."""

__version__ = "0.1.0"
