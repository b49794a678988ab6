"""Reference-free, length-controllable sentence summarization distillation."""

__version__ = "0.1.0"
