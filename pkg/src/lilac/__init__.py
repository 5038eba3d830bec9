"""Language-conditioned object-flow generation and flow-to-trajectory conversion."""

__version__ = "0.1.0"
