"""Online posterior word alignment and alignment-aware lexically constrained beam search."""

__version__ = "0.1.0"
