"""Reference implementation of the summarization-backend wire protocol."""

__version__ = "0.1.0"
