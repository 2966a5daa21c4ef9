"""Second-pass n-best rescoring with personalized-entity mechanisms."""

__version__ = "0.1.0"
