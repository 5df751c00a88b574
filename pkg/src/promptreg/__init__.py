"""Self-regulated deep prompt tuning on a toy frozen dual encoder."""

__version__ = "0.1.0"
