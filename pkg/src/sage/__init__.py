"""Self-evolving assistant/checker loop with decay-based memory."""

__version__ = "0.1.0"
