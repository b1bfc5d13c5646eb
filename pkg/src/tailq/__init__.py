"""Policy-conditioned ICE G-computation, kernel policy embeddings and LTMLE."""

__version__ = "0.1.0"
